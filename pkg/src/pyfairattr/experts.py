import logging
from logging import Logger
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn, Tensor

from .backbone import ExpertSpan, FeatureMap, StagedBackbone, make_spans
from .const import DESCRIPTOR_LENGTH, PoolingKind
from .exceptions import ConfigurationError

logger: Logger = logging.getLogger(__package__)


class ExpertHead(nn.Module):
    """Descriptor head of one expert followed by its linear classifier.

    Attributes
    ----------
    reduce_conv : nn.Conv2d
        1x1 convolution from the stage's channels to half the descriptor length
    expand_conv : nn.Conv2d
        3x3 convolution up to the full descriptor length
    classifier : nn.Linear
        maps a descriptor to K class scores
    pooling : str
        "max" for global max pooling, "avg" for global average pooling

    Methods
    -------
    compress(x):
        returns the pooled descriptor and the map it was pooled from
    classify(v):
        returns class scores for a descriptor
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        descriptor_length: int = DESCRIPTOR_LENGTH,
        pooling: PoolingKind = "max",
    ) -> None:
        super().__init__()
        if descriptor_length < 2 or descriptor_length % 2:
            raise ConfigurationError("Descriptor length must be even and at least 2")
        if num_classes < 2:
            raise ConfigurationError("At least two classes are required")
        if pooling not in ("max", "avg"):
            raise ConfigurationError(f"Unknown pooling {pooling!r}")

        self.in_channels = in_channels
        self.descriptor_length = descriptor_length
        self.pooling = pooling
        self.reduce_conv = nn.Conv2d(in_channels, descriptor_length // 2, kernel_size=1)
        self.reduce_bn = nn.BatchNorm2d(descriptor_length // 2)
        self.expand_conv = nn.Conv2d(
            descriptor_length // 2, descriptor_length, kernel_size=3, padding=1
        )
        self.expand_bn = nn.BatchNorm2d(descriptor_length)
        self.elu = nn.ELU(inplace=False)
        self.classifier = nn.Linear(descriptor_length, num_classes)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def compress(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"Head expects {self.in_channels} channels, got shape {tuple(x.shape)}"
            )
        x_p = self.elu(self.reduce_bn(self.reduce_conv(x)))
        x_pp = self.elu(self.expand_bn(self.expand_conv(x_p)))
        if self.pooling == "max":
            v = torch.amax(x_pp, dim=(2, 3))
        else:
            v = torch.mean(x_pp, dim=(2, 3))
        return v, x_pp

    def classify(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.descriptor_length:
            raise ConfigurationError(
                f"Descriptor length {v.shape[-1]} != {self.descriptor_length}"
            )
        return self.classifier(v)


def compress(x_n: FeatureMap, head: ExpertHead) -> tuple[Tensor, FeatureMap]:
    """Returns v_n and the intermediate map x_n'' kept for the class activation map."""
    v, x_pp = head.compress(x_n.data)
    return v, FeatureMap(x_pp, x_n.expert_index)


def classify(v: Tensor, head: ExpertHead) -> Tensor:
    return head.classify(v)


def predicted_class(scores: Tensor) -> Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return torch.argmax(scores, dim=-1)


def concat_overall(descriptors: Sequence[Tensor], expert_count: int) -> Tensor:
    if len(descriptors) != expert_count:
        raise ConfigurationError(
            f"Expected {expert_count} descriptors, got {len(descriptors)}"
        )
    lengths = {d.shape[-1] for d in descriptors}
    if len(lengths) != 1:
        raise ConfigurationError("Descriptors must share one length")
    return torch.cat(list(descriptors), dim=-1)


@dataclass
class ExpertOutput:
    index: int
    scores: Tensor
    descriptor: Tensor
    activation: Tensor

    @property
    def predicted(self) -> Tensor:
        return predicted_class(self.scores)


@dataclass
class ModelOutput:
    experts: list[ExpertOutput]
    overall_descriptor: Tensor
    overall_scores: Tensor

    def all_scores(self) -> list[Tensor]:
        """Expert scores in expert order followed by the overall scores."""
        return [e.scores for e in self.experts] + [self.overall_scores]


class MultiExpertModel(nn.Module):
    """Backbone shared by N experts of increasing depth plus the overall classifier."""

    def __init__(
        self,
        backbone: StagedBackbone,
        terminal_stages: Sequence[int],
        num_classes: int,
        descriptor_length: int = DESCRIPTOR_LENGTH,
        pooling: PoolingKind = "max",
    ) -> None:
        super().__init__()
        self.backbone = backbone
        self.spans: list[ExpertSpan] = make_spans(terminal_stages, backbone.spec)
        self.heads = nn.ModuleList(
            ExpertHead(
                backbone.spec.channels[span.terminal_stage - 1],
                num_classes,
                descriptor_length,
                pooling,
            )
            for span in self.spans
        )
        self.overall_classifier = nn.Linear(
            len(self.spans) * descriptor_length, num_classes
        )
        self.register_buffer("fitted", torch.tensor(False))

    @property
    def expert_count(self) -> int:
        return len(self.spans)

    @property
    def num_classes(self) -> int:
        return self.overall_classifier.out_features

    @property
    def is_fitted(self) -> bool:
        return bool(self.get_buffer("fitted").item())

    def mark_fitted(self) -> None:
        self.get_buffer("fitted").fill_(True)

    def head(self, n: int) -> ExpertHead:
        if not 1 <= n <= self.expert_count:
            raise ConfigurationError(f"Expert index {n} outside 1..{self.expert_count}")
        head: ExpertHead = self.heads[n - 1]
        return head

    def experts(
        self,
        images: Tensor,
        upto: Optional[int] = None,
        only: Optional[int] = None,
    ) -> list[ExpertOutput]:
        """Evaluates experts 1..upto (default all), or just expert ``only``.

        The backbone runs once and stops at the deepest stage needed.
        """
        if only is not None:
            self.head(only)
            wanted = [self.spans[only - 1]]
        else:
            last = self.expert_count if upto is None else upto
            self.head(last)
            wanted = self.spans[:last]

        outputs = []
        for fmap in self.backbone.forward_collect(images, wanted):
            head = self.head(fmap.expert_index)
            v, x_pp = head.compress(fmap.data)
            outputs.append(ExpertOutput(fmap.expert_index, head.classify(v), v, x_pp))
        return outputs

    def forward(self, images: Tensor) -> ModelOutput:
        outputs = self.experts(images)
        v_oval = concat_overall([o.descriptor for o in outputs], self.expert_count)
        return ModelOutput(outputs, v_oval, self.overall_classifier(v_oval))

    def class_rows(self, output: ExpertOutput) -> Tensor:
        """Classifier weight rows of each sample's predicted class, bias excluded."""
        weight: Tensor = self.head(output.index).classifier.weight
        return weight[output.predicted]


def build_model(
    backbone: StagedBackbone,
    terminal_stages: Sequence[int],
    num_classes: int,
    descriptor_length: int = DESCRIPTOR_LENGTH,
    pooling: PoolingKind = "max",
) -> MultiExpertModel:
    model = MultiExpertModel(
        backbone, terminal_stages, num_classes, descriptor_length, pooling
    )
    logger.info(
        "Built %d experts ending at stages %s, descriptor length %d, %s pooling",
        model.expert_count,
        [s.terminal_stage for s in model.spans],
        descriptor_length,
        pooling,
    )
    return model
