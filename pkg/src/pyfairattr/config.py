import logging
import os
from logging import Logger
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, get_args

from .attention import MaskConfig
from .backbone import build_backbone
from .const import (
    BATCH_SIZE,
    DESCRIPTOR_LENGTH,
    EPOCHS,
    HEATMAP_ALPHA,
    IMAGENET_MEAN,
    IMAGENET_STD,
    INPUT_SIZE,
    LEARNING_RATE,
    MOMENTUM,
    OUTPUT_ROOT_ENV,
    PATIENCE,
    RESNET50_SPANS,
    THRESHOLD,
    WEIGHT_DECAY,
    FusionMode,
    PoolingKind,
    Schedule,
)
from .exceptions import ConfigurationError
from .experts import MultiExpertModel, build_model
from .fileio import write_text_atomic
from .training import TrainConfig

logger: Logger = logging.getLogger(__package__)


@dataclass(frozen=True)
class RunConfig:
    """Everything a train / evaluate / visualize run needs, defaults as in the
    reference ResNet50 setup."""

    backbone: str = "resnet50"
    pretrained: bool = False
    weights_path: str = ""
    input_size: int = INPUT_SIZE
    expert_spans: tuple[int, ...] = RESNET50_SPANS
    descriptor_length: int = DESCRIPTOR_LENGTH
    pooling: PoolingKind = "max"
    num_classes: int = 2
    threshold: float = THRESHOLD
    fusion: FusionMode = "logits"
    schedule: Schedule = "mutual"
    pool_includes_self: bool = True
    per_image_draw: bool = False
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    patience: int = PATIENCE
    seed: int = 0
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    positive_class: int = 1
    dob_ddof: int = 0
    heatmap_alpha: float = HEATMAP_ALPHA
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        errors = []
        if self.input_size < 1:
            errors.append("input_size must be positive")
        if not self.expert_spans:
            errors.append("expert_spans must name at least one stage")
        if not 0.0 <= self.threshold <= 1.0:
            errors.append("threshold must lie in [0, 1]")
        if self.pooling not in get_args(PoolingKind):
            errors.append(f"pooling must be one of {get_args(PoolingKind)}")
        if self.fusion not in get_args(FusionMode):
            errors.append(f"fusion must be one of {get_args(FusionMode)}")
        if self.schedule not in get_args(Schedule):
            errors.append(f"schedule must be one of {get_args(Schedule)}")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        if self.batch_size < 1:
            errors.append("batch_size must be at least 1")
        if self.epochs < 1:
            errors.append("epochs must be at least 1")
        if self.num_classes < 2:
            errors.append("num_classes must be at least 2")
        if len(self.mean) != len(self.std):
            errors.append("mean and std must have the same length")
        if not 0.0 <= self.heatmap_alpha <= 1.0:
            errors.append("heatmap_alpha must lie in [0, 1]")
        if errors:
            raise ConfigurationError("; ".join(errors))

    @property
    def expert_count(self) -> int:
        return len(self.expert_spans)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            expert_count=self.expert_count,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            threshold=self.threshold,
            pool_includes_self=self.pool_includes_self,
            per_image_draw=self.per_image_draw,
            schedule=self.schedule,
        )

    def mask_config(self) -> MaskConfig:
        return MaskConfig(self.threshold)

    def build_model(self, initial_weights: bool = True) -> MultiExpertModel:
        """Builds the model; ``initial_weights=False`` skips pretrained or file weights."""
        backbone = build_backbone(
            self.backbone,
            input_size=self.input_size,
            pretrained=self.pretrained and initial_weights,
            weights_path=(self.weights_path or None) if initial_weights else None,
            in_channels=len(self.mean),
        )
        return build_model(
            backbone,
            self.expert_spans,
            self.num_classes,
            self.descriptor_length,
            self.pooling,
        )

    def resolved_output_dir(self) -> Path:
        """Output directory, relocated under $PYFAIRATTR_OUTPUT_ROOT when that is set."""
        root = os.getenv(OUTPUT_ROOT_ENV)
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def serialize(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Returns a copy with string or typed overrides applied, keys as field names."""
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")
        parsed = {
            key: _parse(value, type(getattr(self, key))) if isinstance(value, str) else value
            for key, value in overrides.items()
        }
        return replace(self, **parsed)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values: dict[str, str] = {}
        errors = []
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errors.append(f"line {number}: expected key = value")
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        if errors:
            raise ConfigurationError("; ".join(errors))
        return cls().with_overrides(values)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigurationError(f"Cannot read config {path}: {err}") from err
        return cls.parse(text)

    def write(self, path: Path) -> None:
        write_text_atomic(path, self.serialize())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, kind: type) -> Any:
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            items = [item.strip() for item in text.split(",") if item.strip()]
            if all(_is_int(item) for item in items):
                return tuple(int(item) for item in items)
            return tuple(float(item) for item in items)
    except ValueError as err:
        raise ConfigurationError(f"Cannot parse {text!r} as {kind.__name__}") from err
    return text


def _is_int(text: str) -> bool:
    return text.lstrip("-").isdigit()
