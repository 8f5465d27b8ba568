import logging
from logging import Logger
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import pandas as pd
import torch
from PIL import Image
from torch import Tensor
from torch.utils.data import Dataset
from torchvision.transforms.functional import pil_to_tensor

from .backbone import preprocess
from .const import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    INPUT_SIZE,
    MANIFEST_PATH_COLUMN,
    MANIFEST_SPLIT_COLUMN,
    MANIFEST_TARGET_COLUMN,
    SPLITS,
)
from .exceptions import ManifestValidationError

logger: Logger = logging.getLogger(__package__)


@dataclass(frozen=True)
class ManifestSchema:
    """Column names of a manifest CSV. Columns not named here are ignored."""

    target_column: str = MANIFEST_TARGET_COLUMN
    protected_columns: tuple[str, ...] = ()
    path_column: str = MANIFEST_PATH_COLUMN
    split_column: str = MANIFEST_SPLIT_COLUMN
    class_vocabulary: Optional[tuple[str, ...]] = None


class TrainingSample(NamedTuple):
    path: Path
    target: int


class EvaluationSample(NamedTuple):
    sample_id: str
    path: Path
    target: int
    protected: tuple[str, ...]


@dataclass
class DatasetManifest:
    """Validated rows of a dataset. Protected attributes are only reachable through
    ``evaluation_view``; training code receives ``training_view`` rows, which carry
    nothing but a path and a class index."""

    schema: ManifestSchema
    classes: tuple[str, ...]
    protected_vocabularies: dict[str, tuple[str, ...]]
    _paths: list[Path] = field(repr=False)
    _targets: list[int] = field(repr=False)
    _splits: list[str] = field(repr=False)
    _protected: list[tuple[str, ...]] = field(repr=False)

    def __len__(self) -> int:
        return len(self._paths)

    def indices(self, split: Optional[str] = None) -> list[int]:
        return [i for i, s in enumerate(self._splits) if split is None or s == split]

    def training_view(self, split: str = "train") -> list[TrainingSample]:
        return [TrainingSample(self._paths[i], self._targets[i]) for i in self.indices(split)]

    def evaluation_view(self, split: str = "test") -> list[EvaluationSample]:
        return [
            EvaluationSample(str(i), self._paths[i], self._targets[i], self._protected[i])
            for i in self.indices(split)
        ]


def load_manifest(
    path: Path,
    schema: ManifestSchema = ManifestSchema(),
    check_paths: bool = True,
) -> DatasetManifest:
    """Loads and validates a manifest CSV with header ``path,target,<protected...>,split``.

    Relative image paths resolve against the manifest's directory. All problems found
    are raised together in one ManifestValidationError.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ManifestValidationError([f"Cannot read manifest {path}: {err}"]) from err

    required = [
        schema.path_column,
        schema.target_column,
        *schema.protected_columns,
        schema.split_column,
    ]
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise ManifestValidationError([f"Missing column {c!r}" for c in missing])

    errors: list[str] = []
    classes = schema.class_vocabulary or tuple(sorted(set(frame[schema.target_column])))
    class_index = {name: i for i, name in enumerate(classes)}
    root = path.parent

    paths: list[Path] = []
    targets: list[int] = []
    splits: list[str] = []
    protected: list[tuple[str, ...]] = []
    for row_number, values in enumerate(frame.to_dict("records"), start=2):
        image_path = Path(values[schema.path_column])
        if not image_path.is_absolute():
            image_path = root / image_path
        if check_paths and not image_path.is_file():
            errors.append(f"row {row_number}: image {image_path} not found")
        target = values[schema.target_column]
        if target not in class_index:
            errors.append(f"row {row_number}: unknown label {target!r}")
        split = values[schema.split_column]
        if split not in SPLITS:
            errors.append(f"row {row_number}: unknown split {split!r}")
        groups = tuple(values[c] for c in schema.protected_columns)
        if any(g == "" for g in groups):
            errors.append(f"row {row_number}: empty protected attribute")
        paths.append(image_path)
        targets.append(class_index.get(target, -1))
        splits.append(split)
        protected.append(groups)

    if errors:
        raise ManifestValidationError(errors)
    if not paths:
        raise ManifestValidationError([f"Manifest {path} has no rows"])

    manifest = DatasetManifest(
        schema=schema,
        classes=tuple(classes),
        protected_vocabularies={
            c: tuple(sorted({p[i] for p in protected}))
            for i, c in enumerate(schema.protected_columns)
        },
        _paths=paths,
        _targets=targets,
        _splits=splits,
        _protected=protected,
    )
    logger.info(
        "Loaded manifest %s: %d rows, classes %s, protected %s",
        path,
        len(manifest),
        list(manifest.classes),
        list(schema.protected_columns),
    )
    return manifest


def load_image(
    path: Path,
    input_size: int = INPUT_SIZE,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> Tensor:
    """Reads an RGB image as a standardized (C, input_size, input_size) tensor."""
    with Image.open(path) as image:
        pixels = pil_to_tensor(image.convert("RGB")).float() / 255.0
    return preprocess(pixels, input_size, mean, std)[0]


class ImageDataset(Dataset[tuple[Tensor, Tensor]]):
    """Images and class indices, nothing else."""

    def __init__(
        self,
        samples: Sequence[TrainingSample],
        input_size: int = INPUT_SIZE,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
    ) -> None:
        self.samples = list(samples)
        self.input_size = input_size
        self.mean = tuple(mean)
        self.std = tuple(std)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> tuple[Tensor, Tensor]:
        sample = self.samples[index]
        image = load_image(sample.path, self.input_size, self.mean, self.std)
        return image, torch.tensor(sample.target, dtype=torch.long)
