import logging
from logging import Logger
from dataclasses import dataclass, field
from typing import Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor

from .const import OVERALL, THRESHOLD
from .exceptions import ConfigurationError

logger: Logger = logging.getLogger(__package__)

Box = tuple[int, int, int, int]
Source = Union[int, str]


@dataclass(frozen=True)
class MaskConfig:
    threshold: float = THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"Threshold {self.threshold} outside [0, 1]")


@dataclass
class AttentionMap:
    raw_cam: Tensor
    upsampled: Tensor
    normalized: Tensor


@dataclass
class AttentionRegion:
    """A crop of the input image, resized back to the input resolution.

    ``box`` is (row_min, col_min, row_max, col_max), inclusive, in input pixels.
    """

    box: Box
    crop: Tensor
    source_expert: Source


def compute_cam(x_pp: Tensor, class_weights: Tensor) -> Tensor:
    """Weighted channel sum at every position.

    Accepts a single (C, H, W) map with (C,) weights or a (B, C, H, W) batch with
    (B, C) weights, one row per sample.
    """
    if x_pp.dim() == 3:
        return compute_cam(x_pp.unsqueeze(0), class_weights.reshape(1, -1))[0]
    if class_weights.dim() == 1:
        class_weights = class_weights.unsqueeze(0).expand(x_pp.shape[0], -1)
    if class_weights.shape != x_pp.shape[:2]:
        raise ConfigurationError(
            f"CAM weights of shape {tuple(class_weights.shape)} do not fit "
            f"a map of shape {tuple(x_pp.shape)}"
        )
    return torch.einsum("bchw,bc->bhw", x_pp, class_weights)


def upsample_bilinear(cam: Tensor, target: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear resampling of a (H, W) or (B, H, W) map."""
    if target[0] < 1 or target[1] < 1:
        raise ConfigurationError(f"Target size {target} must be positive")
    single = cam.dim() == 2
    batch = cam.unsqueeze(0) if single else cam
    out = F.interpolate(
        batch.unsqueeze(1), size=target, mode="bilinear", align_corners=True
    ).squeeze(1)
    return out[0] if single else out


def normalize_minmax(attention: Tensor) -> Tensor:
    """Min-max normalizes over the last two dims; constant maps become zeros."""
    low = attention.amin(dim=(-2, -1), keepdim=True)
    high = attention.amax(dim=(-2, -1), keepdim=True)
    span = high - low
    safe = torch.where(span > 0, span, torch.ones_like(span))
    normalized = (attention - low) / safe
    return torch.where(span > 0, normalized.clamp(0.0, 1.0), torch.zeros_like(normalized))


def threshold_mask(norm_map: Tensor, cfg: MaskConfig) -> Tensor:
    return norm_map > cfg.threshold


def _resize(image: Tensor, size: tuple[int, int]) -> Tensor:
    return F.interpolate(
        image.unsqueeze(0), size=size, mode="bilinear", align_corners=True
    )[0]


def extract_region(image: Tensor, mask: Tensor, source_expert: Source) -> AttentionRegion:
    """Crops the envelope of the positive mask cells and resizes it to the image size.

    An empty mask selects the whole image.
    """
    if image.dim() != 3 or mask.shape != image.shape[-2:]:
        raise ConfigurationError(
            f"Mask {tuple(mask.shape)} does not match image {tuple(image.shape)}"
        )
    height, width = int(image.shape[1]), int(image.shape[2])
    cells = torch.nonzero(mask)
    if cells.shape[0] == 0:
        logger.debug("Empty attention mask from %s, using the full image", source_expert)
        box: Box = (0, 0, height - 1, width - 1)
    else:
        rows, cols = cells[:, 0], cells[:, 1]
        box = (
            int(rows.min()),
            int(cols.min()),
            int(rows.max()),
            int(cols.max()),
        )
    r0, c0, r1, c1 = box
    crop = _resize(image[:, r0 : r1 + 1, c0 : c1 + 1], (height, width))
    return AttentionRegion(box, crop, source_expert)


def overall_attention(
    norm_maps: Sequence[Tensor],
    image: Tensor,
    cfg: MaskConfig,
) -> AttentionRegion:
    """Region of the renormalized sum of the experts' normalized maps."""
    return _overall_region(image, combine_maps(norm_maps), cfg)


def combine_maps(norm_maps: Sequence[Tensor]) -> Tensor:
    """Renormalized sum of normalized maps, single or batched."""
    if not norm_maps:
        raise ConfigurationError("Overall attention needs at least one map")
    return normalize_minmax(torch.stack(list(norm_maps)).sum(dim=0))


def _overall_region(image: Tensor, combined: Tensor, cfg: MaskConfig) -> AttentionRegion:
    return extract_region(image, threshold_mask(combined, cfg), OVERALL)


def attention_map(x_pp: Tensor, class_weights: Tensor, target: tuple[int, int]) -> AttentionMap:
    raw = compute_cam(x_pp, class_weights)
    upsampled = upsample_bilinear(raw, target)
    return AttentionMap(raw, upsampled, normalize_minmax(upsampled))


@dataclass
class RegionSet:
    """Attention regions of one batch: one crop batch per expert plus the overall one."""

    expert_crops: list[Tensor]
    overall_crop: Tensor
    expert_boxes: list[list[Box]]
    overall_boxes: list[Box]
    expert_maps: list[Tensor] = field(default_factory=list)
    overall_map: Tensor | None = None

    @property
    def expert_count(self) -> int:
        return len(self.expert_crops)


@torch.no_grad()
def propose_regions(
    images: Tensor,
    activations: Sequence[Tensor],
    class_rows: Sequence[Tensor],
    cfg: MaskConfig,
) -> RegionSet:
    """Builds A_1..A_N and A_oval for a (B, C, H, W) batch.

    ``activations`` are the experts' x'' maps and ``class_rows`` the weight rows of
    each sample's predicted class. Everything returned is detached.
    """
    if len(activations) != len(class_rows) or not activations:
        raise ConfigurationError("Need one weight row batch per expert activation")
    images = images.detach()
    target = (int(images.shape[2]), int(images.shape[3]))

    norm_maps = [
        attention_map(x.detach(), w.detach(), target).normalized
        for x, w in zip(activations, class_rows)
    ]

    expert_crops: list[Tensor] = []
    expert_boxes: list[list[Box]] = []
    for n, maps in enumerate(norm_maps, start=1):
        regions = [
            extract_region(image, threshold_mask(m, cfg), n)
            for image, m in zip(images, maps)
        ]
        expert_crops.append(torch.stack([r.crop for r in regions]))
        expert_boxes.append([r.box for r in regions])

    combined = combine_maps(norm_maps)
    overall = [
        _overall_region(image, combined[i], cfg) for i, image in enumerate(images)
    ]
    return RegionSet(
        expert_crops=expert_crops,
        overall_crop=torch.stack([r.crop for r in overall]),
        expert_boxes=expert_boxes,
        overall_boxes=[r.box for r in overall],
        expert_maps=norm_maps,
        overall_map=combined,
    )
