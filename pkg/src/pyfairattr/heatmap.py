import logging
from logging import Logger
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from matplotlib.colors import LinearSegmentedColormap
from PIL import Image
from torch import Tensor

from .const import HEATMAP_ALPHA, HEATMAP_RAMP
from .fileio import atomic_path

logger: Logger = logging.getLogger(__package__)

RAMP = LinearSegmentedColormap.from_list("attention", list(HEATMAP_RAMP))


def overlay(image: Tensor, attention: Tensor, alpha: float = HEATMAP_ALPHA) -> np.ndarray:
    """Blends the colour-mapped attention over a (3, H, W) image in [0, 1].

    Returns an (H, W, 3) uint8 array.
    """
    rgb = image.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    colours = RAMP(attention.detach().clamp(0.0, 1.0).cpu().numpy())[..., :3]
    blended = (1.0 - alpha) * rgb + alpha * colours
    return np.rint(blended * 255.0).astype(np.uint8)


def export_heatmaps(
    image: Tensor,
    attention_maps: Sequence[Tensor],
    overall_map: Tensor,
    path: Path,
    stem: str = "image",
    alpha: float = HEATMAP_ALPHA,
) -> list[Path]:
    """Writes one overlay per expert map and one for the overall map.

    ``image`` is a displayable (3, H, W) tensor in [0, 1], maps are (H, W) in [0, 1].
    """
    path.mkdir(parents=True, exist_ok=True)
    named = [(f"{stem}_expert{n}.png", m) for n, m in enumerate(attention_maps, start=1)]
    named.append((f"{stem}_overall.png", overall_map))
    written = []
    for name, attention in named:
        target = path / name
        with atomic_path(target) as tmp:
            Image.fromarray(overlay(image, attention, alpha)).save(tmp, format="PNG")
        written.append(target)
    logger.info("Wrote %d attention overlays to %s", len(written), path)
    return written


def denormalize(image: Tensor, mean: Sequence[float], std: Sequence[float]) -> Tensor:
    """Undoes per-channel standardization of a (3, H, W) tensor."""
    mean_t = torch.tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std_t = torch.tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image * std_t + mean_t).clamp(0.0, 1.0)
