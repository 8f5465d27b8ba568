"""Toy attribute task: is there a high-contrast square on the image?

The protected group is the background tint, so a model can be checked for accuracy
gaps between tints it never sees as labels.
"""
import logging
from logging import Logger
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch import Tensor
from torch.utils.data import TensorDataset

logger: Logger = logging.getLogger(__package__)

TINTS: tuple[tuple[float, float, float], ...] = (
    (0.55, 0.45, 0.35),
    (0.30, 0.38, 0.55),
)


@dataclass
class SquareDataset:
    images: Tensor  # (count, 3, size, size) in [0, 1]
    labels: Tensor
    groups: Tensor
    centers: Tensor  # (count, 2) row/col of the square centre, -1 when absent

    def tensor_dataset(self, mean: float = 0.5, std: float = 0.25) -> TensorDataset:
        return TensorDataset((self.images - mean) / std, self.labels)


def make_square_dataset(
    count: int,
    size: int = 96,
    minority_fraction: float = 0.3,
    seed: int = 0,
    square_fraction: float = 0.2,
) -> SquareDataset:
    """Half the images carry a bright or dark square at a random place.

    Tint group 1 makes up ``minority_fraction`` of the samples.
    """
    rng = np.random.default_rng(seed)
    side = max(2, int(size * square_fraction))
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = rng.integers(0, 2, size=count)
    groups = (rng.random(count) < minority_fraction).astype(np.int64)
    centers = np.full((count, 2), -1, dtype=np.int64)

    for i in range(count):
        tint = np.asarray(TINTS[groups[i]], dtype=np.float32).reshape(3, 1, 1)
        noise = rng.normal(0.0, 0.05, size=(3, size, size)).astype(np.float32)
        images[i] = np.clip(tint + noise, 0.0, 1.0)
        if labels[i]:
            top = int(rng.integers(0, size - side + 1))
            left = int(rng.integers(0, size - side + 1))
            value = 1.0 if rng.random() < 0.5 else 0.0
            images[i, :, top : top + side, left : left + side] = value
            centers[i] = (top + side // 2, left + side // 2)

    return SquareDataset(
        torch.from_numpy(images),
        torch.from_numpy(labels).long(),
        torch.from_numpy(groups),
        torch.from_numpy(centers),
    )


def write_square_dataset(
    root: Path,
    counts: dict[str, int],
    size: int = 96,
    minority_fraction: float = 0.3,
    seed: int = 0,
) -> Path:
    """Writes PNG files and a manifest CSV (path,target,tint,split); returns the manifest."""
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for offset, (split, count) in enumerate(counts.items()):
        data = make_square_dataset(count, size, minority_fraction, seed + offset)
        for i in range(count):
            name = f"{split}_{i:05d}.png"
            pixels = (data.images[i].permute(1, 2, 0).numpy() * 255.0).round()
            Image.fromarray(pixels.astype(np.uint8)).save(root / name)
            rows.append(
                {
                    "path": name,
                    "target": int(data.labels[i]),
                    "tint": int(data.groups[i]),
                    "split": split,
                }
            )
    manifest = root / "manifest.csv"
    pd.DataFrame(rows, columns=["path", "target", "tint", "split"]).to_csv(
        manifest, index=False
    )
    logger.info("Wrote %d synthetic images to %s", len(rows), root)
    return manifest
