import unittest

import torch
import torch.nn.functional as F
from torch import nn

from src.pyfairattr.backbone import (
    ExpertSpan,
    StageSpec,
    StagedBackbone,
    backbone_layers,
    build_backbone,
    forward_collect,
    make_spans,
    partition_stages,
    preprocess,
    toy_layers,
)
from src.pyfairattr.exceptions import (
    ConfigurationError,
    EmptyInputError,
    UnsupportedBackboneError,
)


class PartitionStagesTests(unittest.TestCase):
    def test_halving_blocks_give_one_stage_each(self) -> None:
        spec = partition_stages(toy_layers(), input_size=32)
        self.assertEqual(spec.stage_count, 5)
        self.assertEqual(spec.stage_boundaries, (0, 1, 2, 3, 4))
        self.assertEqual(
            spec.spatial_sizes, ((16, 16), (8, 8), (4, 4), (2, 2), (1, 1))
        )
        self.assertEqual(spec.channels, (16, 32, 48, 64, 96))

    def test_constant_resolution_is_one_stage(self) -> None:
        layers = [nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.Conv2d(4, 4, 1)]
        spec = partition_stages(layers, input_size=8)
        self.assertEqual(spec.stage_count, 1)
        self.assertEqual(spec.stage_boundaries, (2,))
        self.assertEqual(spec.groups(), [range(0, 3)])

    def test_resnet50_has_five_stages(self) -> None:
        backbone = build_backbone("resnet50", input_size=224)
        spec = backbone.spec
        self.assertEqual(spec.stage_count, 5)
        self.assertEqual(spec.stage_boundaries, (2, 4, 5, 6, 7))
        self.assertEqual(spec.channels[-1], 2048)
        spans = make_spans((3, 4, 5), spec)
        self.assertEqual([s.terminal_stage for s in spans], [3, 4, 5])

    def test_every_layer_in_exactly_one_stage(self) -> None:
        layers = toy_layers() + [nn.Conv2d(96, 96, 1)]
        spec = partition_stages(layers, input_size=32)
        covered = [i for group in spec.groups() for i in group]
        self.assertEqual(covered, list(range(len(layers))))

    def test_no_convolution_is_unsupported(self) -> None:
        with self.assertRaises(UnsupportedBackboneError):
            partition_stages([nn.ReLU(), nn.Identity()], input_size=8)
        with self.assertRaises(UnsupportedBackboneError):
            partition_stages([], input_size=8)

    def test_stage_markers_override_detection(self) -> None:
        spec = partition_stages(toy_layers(), input_size=32, stage_markers=[1, 4])
        self.assertEqual(spec.stage_count, 2)
        self.assertEqual(spec.spatial_sizes, ((8, 8), (1, 1)))
        with self.assertRaises(ConfigurationError):
            partition_stages(toy_layers(), input_size=32, stage_markers=[1, 3])

    def test_trace_restores_training_mode(self) -> None:
        layers = toy_layers()
        for layer in layers:
            layer.train()
        partition_stages(layers, input_size=32)
        self.assertTrue(all(layer.training for layer in layers))

    def test_growing_spatial_sizes_are_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            StageSpec(2, (0, 1), ((4, 4), (8, 8)), (4, 4))

    def test_unknown_backbone(self) -> None:
        with self.assertRaises(UnsupportedBackboneError):
            backbone_layers("vgg11")


class MakeSpansTests(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = partition_stages(toy_layers(), input_size=32)

    def test_valid_spans(self) -> None:
        spans = make_spans([1, 3, 5], self.spec)
        self.assertEqual(spans[0], ExpertSpan(1, 1))
        self.assertEqual(spans[-1], ExpertSpan(3, 5))

    def test_invalid_spans(self) -> None:
        for stages in ([], [3, 3, 5], [4, 2, 5], [1, 3], [0, 5], [2, 6]):
            with self.subTest(stages=stages):
                with self.assertRaises(ConfigurationError):
                    make_spans(stages, self.spec)


class ForwardCollectTests(unittest.TestCase):
    def setUp(self) -> None:
        torch.manual_seed(0)
        self.layers = toy_layers()
        self.backbone = StagedBackbone(self.layers, partition_stages(self.layers, 32))
        self.backbone.eval()
        self.images = torch.randn(2, 3, 32, 32)

    def test_maps_shrink_with_depth(self) -> None:
        spans = make_spans([3, 4, 5], self.backbone.spec)
        maps = forward_collect(self.images, self.backbone, spans)
        self.assertEqual(len(maps), 3)
        sizes = [m.data.shape[-1] for m in maps]
        self.assertEqual(sizes, [4, 2, 1])
        self.assertEqual([m.expert_index for m in maps], [1, 2, 3])
        self.assertTrue(all(m.data.shape[0] == 2 for m in maps))

    def test_single_expert_equals_plain_forward(self) -> None:
        (fmap,) = self.backbone.forward_collect(self.images, make_spans([5], self.backbone.spec))
        self.assertTrue(torch.equal(fmap.data, self.backbone(self.images)))

    def test_matches_manual_forward(self) -> None:
        # running statistics away from the defaults so eval-mode batch norm matters
        with torch.no_grad():
            for layer in self.layers:
                bn = layer[1]
                bn.running_mean.uniform_(-0.5, 0.5)
                bn.running_var.uniform_(0.5, 2.0)
        (fmap,) = self.backbone.forward_collect(self.images, [ExpertSpan(1, 3)])

        x = self.images
        for layer in self.layers[:3]:
            conv, bn = layer[0], layer[1]
            x = F.conv2d(x, conv.weight, conv.bias, padding=1)
            x = (x - bn.running_mean.view(1, -1, 1, 1)) / torch.sqrt(
                bn.running_var.view(1, -1, 1, 1) + bn.eps
            )
            x = x * bn.weight.view(1, -1, 1, 1) + bn.bias.view(1, -1, 1, 1)
            x = torch.clamp(x, min=0.0)
            x = F.max_pool2d(x, 2)
        torch.testing.assert_close(fmap.data, x, rtol=1e-5, atol=1e-6)

    def test_deterministic(self) -> None:
        spans = make_spans([3, 4, 5], self.backbone.spec)
        first = self.backbone.forward_collect(self.images, spans)
        second = self.backbone.forward_collect(self.images, spans)
        for a, b in zip(first, second):
            self.assertTrue(torch.equal(a.data, b.data))

    def test_shallow_map_ignores_deeper_stages(self) -> None:
        spans = [ExpertSpan(1, 3)]
        before = self.backbone.forward_collect(self.images, spans)[0].data
        with torch.no_grad():
            for p in self.backbone.stages[3].parameters():
                p.add_(1.0)
            for p in self.backbone.stages[4].parameters():
                p.mul_(-2.0)
        after = self.backbone.forward_collect(self.images, spans)[0].data
        self.assertTrue(torch.equal(before, after))

    def test_errors(self) -> None:
        with self.assertRaises(EmptyInputError):
            self.backbone.forward_collect(torch.empty(0, 3, 32, 32), [ExpertSpan(1, 5)])
        with self.assertRaises(ConfigurationError):
            self.backbone.forward_collect(self.images, [ExpertSpan(1, 6)])
        with self.assertRaises(ConfigurationError):
            self.backbone.forward_collect(self.images, [ExpertSpan(1, 0)])


class PreprocessTests(unittest.TestCase):
    def test_resize_and_standardize(self) -> None:
        images = torch.full((2, 3, 10, 14), 0.5)
        out = preprocess(images, input_size=16, mean=(0.5, 0.25, 0.0), std=(0.5, 0.25, 0.5))
        self.assertEqual(tuple(out.shape), (2, 3, 16, 16))
        torch.testing.assert_close(out[:, 0], torch.zeros(2, 16, 16))
        torch.testing.assert_close(out[:, 1], torch.ones(2, 16, 16))
        torch.testing.assert_close(out[:, 2], torch.ones(2, 16, 16))

    def test_single_image_gains_batch_dim(self) -> None:
        out = preprocess(torch.rand(3, 8, 8), input_size=8)
        self.assertEqual(tuple(out.shape), (1, 3, 8, 8))

    def test_corners_survive_resize(self) -> None:
        images = torch.rand(1, 3, 5, 7)
        out = preprocess(images, input_size=9, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        for (r, c), (R, C) in (((0, 0), (0, 0)), ((4, 6), (8, 8)), ((0, 6), (0, 8))):
            torch.testing.assert_close(out[0, :, R, C], images[0, :, r, c])


if __name__ == "__main__":
    unittest.main()
