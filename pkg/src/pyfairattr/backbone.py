import logging
from logging import Logger
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn, Tensor
from torchvision import models

from .const import IMAGENET_MEAN, IMAGENET_STD, INPUT_SIZE
from .exceptions import (
    ConfigurationError,
    EmptyInputError,
    UnsupportedBackboneError,
)

logger: Logger = logging.getLogger(__package__)


@dataclass(frozen=True)
class StageSpec:
    """Grouping of an ordered layer list into stages.

    Attributes
    ----------
    stage_count : int
        number of stages M
    stage_boundaries : tuple[int, ...]
        index of the last layer of each stage, shallow to deep
    spatial_sizes : tuple[tuple[int, int], ...]
        (height, width) of each stage's output map for the traced input size
    channels : tuple[int, ...]
        channel count of each stage's output map
    """

    stage_count: int
    stage_boundaries: tuple[int, ...]
    spatial_sizes: tuple[tuple[int, int], ...]
    channels: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.stage_count < 1 or len(self.stage_boundaries) != self.stage_count:
            raise ConfigurationError("Stage boundaries do not match the stage count")
        if list(self.stage_boundaries) != sorted(set(self.stage_boundaries)):
            raise ConfigurationError("Stage boundaries must strictly increase")
        for (h0, w0), (h1, w1) in zip(self.spatial_sizes, self.spatial_sizes[1:]):
            if h1 > h0 or w1 > w0:
                raise ConfigurationError(
                    "Stage spatial sizes must not grow from shallow to deep"
                )

    def groups(self) -> list[range]:
        """Layer index ranges, one per stage."""
        starts = (0,) + tuple(b + 1 for b in self.stage_boundaries[:-1])
        return [range(s, b + 1) for s, b in zip(starts, self.stage_boundaries)]


@dataclass(frozen=True)
class ExpertSpan:
    expert_index: int
    terminal_stage: int


@dataclass(frozen=True)
class FeatureMap:
    """Activation volume at an expert's terminal stage, laid out (B, C, H, W)."""

    data: Tensor
    expert_index: int


def make_spans(terminal_stages: Sequence[int], spec: StageSpec) -> list[ExpertSpan]:
    """Builds and validates expert spans from their terminal stage numbers (1-based)."""
    if not terminal_stages:
        raise ConfigurationError("At least one expert is required")
    if any(b <= a for a, b in zip(terminal_stages, terminal_stages[1:])):
        raise ConfigurationError("Expert terminal stages must strictly increase")
    if terminal_stages[0] < 1 or terminal_stages[-1] > spec.stage_count:
        raise ConfigurationError(
            f"Expert terminal stages must lie in 1..{spec.stage_count}"
        )
    if terminal_stages[-1] != spec.stage_count:
        raise ConfigurationError("The deepest expert must end at the last stage")
    return [ExpertSpan(n + 1, m) for n, m in enumerate(terminal_stages)]


def _has_convolution(layers: Sequence[nn.Module]) -> bool:
    return any(
        isinstance(module, nn.modules.conv._ConvNd)
        for layer in layers
        for module in layer.modules()
    )


def partition_stages(
    layers: Sequence[nn.Module],
    input_size: int = INPUT_SIZE,
    in_channels: int = 3,
    stage_markers: Optional[Sequence[int]] = None,
) -> StageSpec:
    """Groups an ordered layer list into maximal runs of equal output spatial size.

    The sizes come from a shape trace of a zero image. Backbones that know their own
    stages can pass ``stage_markers`` (last layer index of each stage) instead.
    """
    if not layers or not _has_convolution(layers):
        raise UnsupportedBackboneError("Backbone has no convolutional layers")

    sizes: list[tuple[int, int]] = []
    channels: list[int] = []
    modes = [layer.training for layer in layers]
    try:
        x = torch.zeros(1, in_channels, input_size, input_size)
        with torch.no_grad():
            for layer in layers:
                layer.eval()
                x = layer(x)
                if x.dim() != 4:
                    raise UnsupportedBackboneError(
                        f"Layer {type(layer).__name__} does not emit a spatial map"
                    )
                sizes.append((int(x.shape[2]), int(x.shape[3])))
                channels.append(int(x.shape[1]))
    finally:
        for layer, mode in zip(layers, modes):
            layer.train(mode)

    if stage_markers is not None:
        boundaries = list(stage_markers)
        if not boundaries or boundaries[-1] != len(layers) - 1:
            raise ConfigurationError("Stage markers must end at the last layer")
    else:
        boundaries = [
            i
            for i in range(len(layers))
            if i == len(layers) - 1 or sizes[i + 1] != sizes[i]
        ]

    spec = StageSpec(
        stage_count=len(boundaries),
        stage_boundaries=tuple(boundaries),
        spatial_sizes=tuple(sizes[b] for b in boundaries),
        channels=tuple(channels[b] for b in boundaries),
    )
    logger.debug("Partitioned %d layers into %d stages", len(layers), spec.stage_count)
    return spec


class StagedBackbone(nn.Module):
    """A backbone cut into stages so that every expert reuses the shared prefix."""

    def __init__(self, layers: Sequence[nn.Module], spec: StageSpec) -> None:
        super().__init__()
        self.spec = spec
        self.stages = nn.ModuleList(
            nn.Sequential(*(layers[i] for i in group)) for group in spec.groups()
        )

    def forward(self, images: Tensor) -> Tensor:
        x = images
        for stage in self.stages:
            x = stage(x)
        return x

    def forward_collect(
        self,
        images: Tensor,
        spans: Sequence[ExpertSpan],
    ) -> list[FeatureMap]:
        """Runs one forward pass and returns the map at each span's terminal stage.

        Stages deeper than the deepest requested span are not evaluated.
        """
        if images.dim() != 4 or images.shape[0] == 0:
            raise EmptyInputError("Image batch is empty")
        if not spans:
            return []
        for span in spans:
            if not 1 <= span.terminal_stage <= self.spec.stage_count:
                raise ConfigurationError(
                    f"Expert {span.expert_index} ends at stage {span.terminal_stage}, "
                    f"backbone has {self.spec.stage_count}"
                )

        wanted = {span.terminal_stage for span in spans}
        collected: dict[int, Tensor] = {}
        x = images
        for m, stage in enumerate(self.stages, start=1):
            if m > max(wanted):
                break
            x = stage(x)
            if m in wanted:
                collected[m] = x
        return [FeatureMap(collected[s.terminal_stage], s.expert_index) for s in spans]


def forward_collect(
    images: Tensor,
    backbone: StagedBackbone,
    spans: Sequence[ExpertSpan],
) -> list[FeatureMap]:
    return backbone.forward_collect(images, spans)


def _conv_block(c_in: int, c_out: int, pool: bool) -> nn.Sequential:
    block: list[nn.Module] = [
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    ]
    if pool:
        block.append(nn.MaxPool2d(2))
    return nn.Sequential(*block)


def toy_layers(
    stage_channels: Sequence[int] = (16, 32, 48, 64, 96),
    in_channels: int = 3,
) -> list[nn.Module]:
    """One conv block per stage, each block halving the resolution."""
    layers: list[nn.Module] = []
    c_in = in_channels
    for c_out in stage_channels:
        layers.append(_conv_block(c_in, c_out, pool=True))
        c_in = c_out
    return layers


def _resnet_layers(net: models.ResNet) -> list[nn.Module]:
    # fc and avgpool are classifier heads and stay out of the stages
    return [
        net.conv1,
        net.bn1,
        net.relu,
        net.maxpool,
        net.layer1,
        net.layer2,
        net.layer3,
        net.layer4,
    ]


def backbone_layers(
    name: str,
    pretrained: bool = False,
    weights_path: Optional[str] = None,
    in_channels: int = 3,
) -> list[nn.Module]:
    """Returns the ordered, classifier-free layer list of a named backbone."""
    match name:
        case "resnet50":
            net = models.resnet50(
                weights=models.ResNet50_Weights.DEFAULT if pretrained else None
            )
        case "resnet18":
            net = models.resnet18(
                weights=models.ResNet18_Weights.DEFAULT if pretrained else None
            )
        case "toy":
            return toy_layers(in_channels=in_channels)
        case "micro":
            return toy_layers((4, 4, 4), in_channels=in_channels)
        case _:
            raise UnsupportedBackboneError(f"Unknown backbone {name!r}")

    if weights_path:
        state = torch.load(Path(weights_path), map_location="cpu")
        missing, _ = net.load_state_dict(state, strict=False)
        if missing:
            logger.warning("Backbone weights file is missing %d tensors", len(missing))
    return _resnet_layers(net)


def build_backbone(
    name: str,
    input_size: int = INPUT_SIZE,
    pretrained: bool = False,
    weights_path: Optional[str] = None,
    in_channels: int = 3,
    stage_markers: Optional[Sequence[int]] = None,
) -> StagedBackbone:
    layers = backbone_layers(name, pretrained, weights_path, in_channels)
    spec = partition_stages(layers, input_size, in_channels, stage_markers)
    logger.info(
        "Built %s backbone with %d stages, spatial sizes %s",
        name,
        spec.stage_count,
        list(spec.spatial_sizes),
    )
    return StagedBackbone(layers, spec)


def preprocess(
    images: Tensor,
    input_size: int = INPUT_SIZE,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> Tensor:
    """Resizes a (B, C, H, W) batch in [0, 1] to a square input and standardizes channels."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.shape[-2:] != (input_size, input_size):
        images = F.interpolate(
            images,
            size=(input_size, input_size),
            mode="bilinear",
            align_corners=True,
        )
    mean_t = torch.tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    std_t = torch.tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - mean_t) / std_t
