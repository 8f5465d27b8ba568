import logging
from logging import Logger
from dataclasses import dataclass
from typing import Sequence, Union

import torch
from torch import Tensor
from torch.utils.data import DataLoader

from .attention import MaskConfig, RegionSet, propose_regions
from .const import OVERALL, FusionMode, InputKind
from .exceptions import ConfigurationError, EmptyInputError, ModelStateError
from .experts import ModelOutput, MultiExpertModel, predicted_class

logger: Logger = logging.getLogger(__package__)

ScoreSource = tuple[Union[int, str], InputKind]


@dataclass
class PredictionBundle:
    """The 2 x (N + 1) score batches of fused inference.

    ``raw_scores`` and ``region_scores`` hold the experts' scores in expert order
    followed by the overall classifier's scores, each (B, K).
    """

    raw_scores: list[Tensor]
    region_scores: list[Tensor]
    fused: Tensor
    regions: RegionSet

    @property
    def constituents(self) -> list[Tensor]:
        return self.raw_scores + self.region_scores

    @property
    def labels(self) -> Tensor:
        return predicted_class(self.fused)

    def score(self, source: ScoreSource) -> Tensor:
        return self.constituents[_source_index(source, len(self.raw_scores) - 1)]


def _source_index(source: ScoreSource, expert_count: int) -> int:
    who, kind = source
    if kind not in ("raw", "region"):
        raise ConfigurationError(f"Unknown input kind {kind!r}")
    if who == OVERALL:
        position = expert_count
    elif isinstance(who, int) and not isinstance(who, bool) and 1 <= who <= expert_count:
        position = who - 1
    else:
        raise ConfigurationError(f"Unknown score source {who!r}")
    return position if kind == "raw" else expert_count + 1 + position


def fuse_scores(constituents: Sequence[Tensor], fusion: FusionMode = "logits") -> Tensor:
    """Element-wise mean of score vectors, of logits or of softmax probabilities."""
    if not constituents:
        raise EmptyInputError("No score vectors to fuse")
    stacked = torch.stack(list(constituents))
    if fusion == "softmax":
        stacked = stacked.softmax(dim=-1)
    elif fusion != "logits":
        raise ConfigurationError(f"Unknown fusion mode {fusion!r}")
    return stacked.mean(dim=0)


def _require_fitted(model: MultiExpertModel) -> None:
    if not model.is_fitted:
        raise ModelStateError("Model has not been trained or loaded from a checkpoint")


def _raw_pass(
    images: Tensor, model: MultiExpertModel, mask_config: MaskConfig
) -> tuple[ModelOutput, RegionSet]:
    out = model(images)
    regions = propose_regions(
        images,
        [e.activation for e in out.experts],
        [model.class_rows(e) for e in out.experts],
        mask_config,
    )
    return out, regions


@torch.no_grad()
def predict_fused(
    images: Tensor,
    model: MultiExpertModel,
    mask_config: MaskConfig = MaskConfig(),
    fusion: FusionMode = "logits",
) -> PredictionBundle:
    """Feeds the raw input then A_oval through the model and averages all scores."""
    _require_fitted(model)
    model.eval()
    raw_out, regions = _raw_pass(images, model, mask_config)
    region_out = model(regions.overall_crop)
    raw_scores = raw_out.all_scores()
    region_scores = region_out.all_scores()
    fused = fuse_scores(raw_scores + region_scores, fusion)
    return PredictionBundle(raw_scores, region_scores, fused, regions)


@torch.no_grad()
def predict_single(
    images: Tensor,
    model: MultiExpertModel,
    source: ScoreSource,
    mask_config: MaskConfig = MaskConfig(),
) -> Tensor:
    """One constituent of the fused prediction, e.g. ``(2, "raw")`` or ``("overall", "region")``."""
    index = _source_index(source, model.expert_count)
    _require_fitted(model)
    model.eval()
    raw_out, regions = _raw_pass(images, model, mask_config)
    if index <= model.expert_count:
        return raw_out.all_scores()[index]
    return model(regions.overall_crop).all_scores()[index - model.expert_count - 1]


def source_names(expert_count: int) -> list[str]:
    names = [f"e{n}" for n in range(1, expert_count + 1)] + [OVERALL]
    return [f"{name}/raw" for name in names] + [f"{name}/region" for name in names]


@torch.no_grad()
def predict_loader(
    model: MultiExpertModel,
    loader: DataLoader[tuple[Tensor, Tensor]],
    mask_config: MaskConfig = MaskConfig(),
    fusion: FusionMode = "logits",
) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Fused scores, targets and every constituent for a whole loader, in loader order."""
    fused: list[Tensor] = []
    targets: list[Tensor] = []
    parts: list[list[Tensor]] = []
    for images, labels in loader:
        bundle = predict_fused(images, model, mask_config, fusion)
        fused.append(bundle.fused)
        targets.append(labels)
        parts.append(bundle.constituents)
    if not fused:
        raise EmptyInputError("Nothing to predict")
    constituents = [torch.cat(column) for column in zip(*parts)]
    return torch.cat(fused), torch.cat(targets), constituents


def fusion_ablation(
    model: MultiExpertModel,
    loader: DataLoader[tuple[Tensor, Tensor]],
    mask_config: MaskConfig = MaskConfig(),
    fusion: FusionMode = "logits",
) -> dict[str, float]:
    """Accuracy in percent of every constituent, of the raw-only and region-only
    averages, and of the full fusion."""
    fused, targets, constituents = predict_loader(model, loader, mask_config, fusion)
    half = len(constituents) // 2

    def accuracy(scores: Tensor) -> float:
        return 100.0 * float((predicted_class(scores) == targets).double().mean())

    result = {
        name: accuracy(scores)
        for name, scores in zip(source_names(model.expert_count), constituents)
    }
    result["fused/raw"] = accuracy(fuse_scores(constituents[:half], fusion))
    result["fused/region"] = accuracy(fuse_scores(constituents[half:], fusion))
    result["fused"] = accuracy(fused)
    logger.info("Fusion ablation: %s", {k: round(v, 2) for k, v in result.items()})
    return result
