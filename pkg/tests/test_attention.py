import math
import unittest

import numpy as np
import torch
from torch import Tensor

from src.pyfairattr.attention import (
    MaskConfig,
    attention_map,
    compute_cam,
    extract_region,
    normalize_minmax,
    overall_attention,
    propose_regions,
    threshold_mask,
    upsample_bilinear,
)
from src.pyfairattr.const import OVERALL
from src.pyfairattr.exceptions import ConfigurationError


def cam_oracle(x_pp: Tensor, weights: Tensor) -> Tensor:
    channels, height, width = x_pp.shape
    out = torch.zeros(height, width, dtype=x_pp.dtype)
    for i in range(height):
        for j in range(width):
            out[i, j] = sum(weights[c].item() * x_pp[c, i, j].item() for c in range(channels))
    return out


def bilinear_oracle(source: Tensor, height: int, width: int) -> Tensor:
    """Corner-aligned bilinear resampling written out pixel by pixel."""
    h_in, w_in = source.shape
    out = torch.zeros(height, width, dtype=torch.float64)
    for i in range(height):
        y = i * (h_in - 1) / (height - 1) if height > 1 else 0.0
        y0 = math.floor(y)
        y1 = min(y0 + 1, h_in - 1)
        dy = y - y0
        for j in range(width):
            x = j * (w_in - 1) / (width - 1) if width > 1 else 0.0
            x0 = math.floor(x)
            x1 = min(x0 + 1, w_in - 1)
            dx = x - x0
            out[i, j] = (
                (1 - dy) * (1 - dx) * source[y0, x0].item()
                + (1 - dy) * dx * source[y0, x1].item()
                + dy * (1 - dx) * source[y1, x0].item()
                + dy * dx * source[y1, x1].item()
            )
    return out


class ComputeCamTests(unittest.TestCase):
    def test_zero_weights(self) -> None:
        cam = compute_cam(torch.randn(8, 3, 3), torch.zeros(8))
        self.assertTrue(torch.equal(cam, torch.zeros(3, 3)))

    def test_one_hot_selects_channel(self) -> None:
        x_pp = torch.randn(8, 3, 3)
        weights = torch.zeros(8)
        weights[5] = 1.0
        torch.testing.assert_close(compute_cam(x_pp, weights), x_pp[5])

    def test_random_maps_match_oracle_and_are_linear(self) -> None:
        generator = torch.Generator().manual_seed(3)
        for _ in range(100):
            c, h, w = (int(v) for v in torch.randint(1, 9, (3,), generator=generator))
            c = c * 2
            x_pp = torch.randn(c, h, w, generator=generator, dtype=torch.float64)
            w1 = torch.randn(c, generator=generator, dtype=torch.float64)
            w2 = torch.randn(c, generator=generator, dtype=torch.float64)
            cam = compute_cam(x_pp, w1)
            self.assertEqual(tuple(cam.shape), (h, w))
            torch.testing.assert_close(cam, cam_oracle(x_pp, w1), rtol=1e-6, atol=1e-9)
            torch.testing.assert_close(
                compute_cam(x_pp, w1 + w2),
                cam + compute_cam(x_pp, w2),
                rtol=1e-6,
                atol=1e-9,
            )

    def test_batched_rows(self) -> None:
        x_pp = torch.randn(3, 4, 2, 5)
        rows = torch.randn(3, 4)
        batched = compute_cam(x_pp, rows)
        for b in range(3):
            torch.testing.assert_close(batched[b], compute_cam(x_pp[b], rows[b]))

    def test_weight_length_mismatch(self) -> None:
        with self.assertRaises(ConfigurationError):
            compute_cam(torch.randn(8, 3, 3), torch.randn(7))


class UpsampleBilinearTests(unittest.TestCase):
    def test_identity_is_exact(self) -> None:
        cam = torch.randn(5, 6)
        self.assertTrue(torch.equal(upsample_bilinear(cam, (5, 6)), cam))

    def test_constant_stays_constant(self) -> None:
        out = upsample_bilinear(torch.full((3, 4), 2.5), (9, 13))
        torch.testing.assert_close(out, torch.full((9, 13), 2.5))

    def test_two_by_two_to_four_by_four(self) -> None:
        cam = torch.tensor([[0.0, 3.0], [6.0, 9.0]], dtype=torch.float64)
        out = upsample_bilinear(cam, (4, 4))
        torch.testing.assert_close(out, bilinear_oracle(cam, 4, 4), rtol=1e-6, atol=1e-9)
        # corners are kept and the first row is an even ramp
        torch.testing.assert_close(out[0], torch.tensor([0.0, 1.0, 2.0, 3.0], dtype=torch.float64))
        self.assertAlmostEqual(out[3, 3].item(), 9.0)

    def test_three_by_five_to_seven_by_eleven(self) -> None:
        cam = torch.randn(3, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        out = upsample_bilinear(cam, (7, 11))
        torch.testing.assert_close(out, bilinear_oracle(cam, 7, 11), rtol=1e-6, atol=1e-9)

    def test_batched(self) -> None:
        cams = torch.randn(2, 3, 3)
        out = upsample_bilinear(cams, (5, 5))
        self.assertEqual(tuple(out.shape), (2, 5, 5))
        torch.testing.assert_close(out[1], upsample_bilinear(cams[1], (5, 5)))

    def test_non_positive_target(self) -> None:
        with self.assertRaises(ConfigurationError):
            upsample_bilinear(torch.randn(2, 2), (0, 4))


class NormalizeAndMaskTests(unittest.TestCase):
    def test_formula(self) -> None:
        out = normalize_minmax(torch.tensor([[1.0, 3.0], [5.0, 9.0]]))
        self.assertEqual(out.tolist(), [[0.0, 0.25], [0.5, 1.0]])

    def test_constant_map_is_zero(self) -> None:
        self.assertTrue(torch.equal(normalize_minmax(torch.full((3, 3), 4.0)), torch.zeros(3, 3)))

    def test_idempotent_on_unit_range(self) -> None:
        norm = normalize_minmax(torch.randn(6, 6))
        torch.testing.assert_close(normalize_minmax(norm), norm)

    def test_threshold_is_strict(self) -> None:
        norm = torch.tensor([[0.0, 0.25], [0.5, 1.0]])
        mask = threshold_mask(norm, MaskConfig(0.5))
        self.assertEqual(mask.tolist(), [[False, False], [False, True]])
        self.assertFalse(bool(threshold_mask(norm, MaskConfig(1.0)).any()))
        self.assertEqual(
            threshold_mask(norm, MaskConfig(0.0)).tolist(), [[False, True], [True, True]]
        )

    def test_threshold_range(self) -> None:
        for t in (-0.1, 1.5):
            with self.assertRaises(ConfigurationError):
                MaskConfig(t)


class ExtractRegionTests(unittest.TestCase):
    def setUp(self) -> None:
        self.image = torch.rand(3, 6, 6)

    def test_single_cell(self) -> None:
        mask = torch.zeros(6, 6, dtype=torch.bool)
        mask[2, 3] = True
        region = extract_region(self.image, mask, 1)
        self.assertEqual(region.box, (2, 3, 2, 3))
        self.assertEqual(tuple(region.crop.shape), (3, 6, 6))
        expected = self.image[:, 2, 3].view(3, 1, 1).expand(3, 6, 6)
        torch.testing.assert_close(region.crop, expected)

    def test_full_mask_keeps_image(self) -> None:
        region = extract_region(self.image, torch.ones(6, 6, dtype=torch.bool), 2)
        self.assertEqual(region.box, (0, 0, 5, 5))
        torch.testing.assert_close(region.crop, self.image)

    def test_envelope(self) -> None:
        mask = torch.zeros(6, 6, dtype=torch.bool)
        mask[1, 0] = True
        mask[4, 2] = True
        self.assertEqual(extract_region(self.image, mask, 1).box, (1, 0, 4, 2))

    def test_empty_mask_falls_back_to_full_image(self) -> None:
        region = extract_region(self.image, torch.zeros(6, 6, dtype=torch.bool), 3)
        self.assertEqual(region.box, (0, 0, 5, 5))
        self.assertEqual(region.source_expert, 3)

    def test_shape_mismatch(self) -> None:
        with self.assertRaises(ConfigurationError):
            extract_region(self.image, torch.ones(5, 6, dtype=torch.bool), 1)


class RandomizedPipelineTests(unittest.TestCase):
    def test_thousand_random_maps(self) -> None:
        rng = np.random.default_rng(7)
        image = torch.rand(3, 12, 12)
        for trial in range(1000):
            raw = torch.from_numpy(rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6)))))
            if trial % 50 == 0:
                raw = torch.full_like(raw, float(rng.normal()))
            norm = normalize_minmax(upsample_bilinear(raw.float(), (12, 12)))
            self.assertGreaterEqual(float(norm.min()), 0.0)
            self.assertLessEqual(float(norm.max()), 1.0)

            t1, t2 = sorted(float(t) for t in rng.random(2))
            low, high = threshold_mask(norm, MaskConfig(t1)), threshold_mask(norm, MaskConfig(t2))
            self.assertFalse(bool((high & ~low).any()))

            region = extract_region(image, low, 1)
            self.assertEqual(tuple(region.crop.shape), (3, 12, 12))
            r0, c0, r1, c1 = region.box
            self.assertTrue(0 <= r0 <= r1 < 12 and 0 <= c0 <= c1 < 12)
            if not bool(low.any()):
                self.assertEqual(region.box, (0, 0, 11, 11))
                continue
            cells = torch.nonzero(low)
            self.assertTrue(bool((cells[:, 0] >= r0).all() and (cells[:, 0] <= r1).all()))
            self.assertTrue(bool((cells[:, 1] >= c0).all() and (cells[:, 1] <= c1).all()))
            # minimal: every edge of the box touches a positive cell
            self.assertTrue(bool(low[r0, c0 : c1 + 1].any() and low[r1, c0 : c1 + 1].any()))
            self.assertTrue(bool(low[r0 : r1 + 1, c0].any() and low[r0 : r1 + 1, c1].any()))


class OverallAttentionTests(unittest.TestCase):
    def setUp(self) -> None:
        self.image = torch.rand(3, 4, 4)
        self.cfg = MaskConfig(0.5)

    def test_single_map_matches_its_region(self) -> None:
        norm = normalize_minmax(torch.rand(4, 4))
        overall = overall_attention([norm], self.image, self.cfg)
        alone = extract_region(self.image, threshold_mask(norm, self.cfg), 1)
        self.assertEqual(overall.box, alone.box)
        self.assertEqual(overall.source_expert, OVERALL)
        torch.testing.assert_close(overall.crop, alone.crop)

    def test_identical_maps(self) -> None:
        norm = normalize_minmax(torch.rand(4, 4))
        overall = overall_attention([norm, norm, norm], self.image, self.cfg)
        alone = extract_region(self.image, threshold_mask(norm, self.cfg), 1)
        self.assertEqual(overall.box, alone.box)

    def test_disjoint_hotspots(self) -> None:
        first = torch.zeros(4, 4)
        first[0, 0] = 1.0
        second = torch.zeros(4, 4)
        second[3, 2] = 1.0
        # the sum has two cells at 1 and zeros elsewhere, both survive t = 0.5
        self.assertEqual(overall_attention([first, second], self.image, self.cfg).box, (0, 0, 3, 2))

    def test_empty_list(self) -> None:
        with self.assertRaises(ConfigurationError):
            overall_attention([], self.image, self.cfg)


class ProposeRegionsTests(unittest.TestCase):
    def test_shapes_and_detachment(self) -> None:
        images = torch.rand(2, 3, 16, 16, requires_grad=True)
        activations = [torch.randn(2, 4, 4, 4, requires_grad=True), torch.randn(2, 4, 2, 2)]
        rows = [torch.randn(2, 4), torch.randn(2, 4)]
        regions = propose_regions(images, activations, rows, MaskConfig())
        self.assertEqual(regions.expert_count, 2)
        self.assertEqual(tuple(regions.overall_crop.shape), (2, 3, 16, 16))
        for crops in regions.expert_crops:
            self.assertEqual(tuple(crops.shape), (2, 3, 16, 16))
            self.assertFalse(crops.requires_grad)
        self.assertFalse(regions.overall_crop.requires_grad)
        self.assertEqual(len(regions.overall_boxes), 2)
        assert regions.overall_map is not None
        self.assertEqual(tuple(regions.overall_map.shape), (2, 16, 16))

    def test_maps_follow_attention_map(self) -> None:
        images = torch.rand(1, 3, 8, 8)
        x_pp = torch.randn(1, 4, 2, 2)
        rows = torch.randn(1, 4)
        regions = propose_regions(images, [x_pp], [rows], MaskConfig())
        expected = attention_map(x_pp, rows, (8, 8)).normalized
        torch.testing.assert_close(regions.expert_maps[0], expected)

    def test_overall_region_follows_overall_map(self) -> None:
        generator = torch.Generator().manual_seed(7)
        images = torch.rand(3, 3, 12, 12, generator=generator)
        activations = [torch.randn(3, 4, 3, 3, generator=generator) for _ in range(3)]
        rows = [torch.randn(3, 4, generator=generator) for _ in range(3)]
        cfg = MaskConfig(0.4)
        regions = propose_regions(images, activations, rows, cfg)
        assert regions.overall_map is not None
        for i in range(3):
            from_map = extract_region(images[i], threshold_mask(regions.overall_map[i], cfg), OVERALL)
            per_image = overall_attention([maps[i] for maps in regions.expert_maps], images[i], cfg)
            self.assertEqual(regions.overall_boxes[i], from_map.box)
            self.assertEqual(regions.overall_boxes[i], per_image.box)
            torch.testing.assert_close(regions.overall_crop[i], from_map.crop)

    def test_count_mismatch(self) -> None:
        with self.assertRaises(ConfigurationError):
            propose_regions(torch.rand(1, 3, 8, 8), [torch.randn(1, 4, 2, 2)], [], MaskConfig())


if __name__ == "__main__":
    unittest.main()
