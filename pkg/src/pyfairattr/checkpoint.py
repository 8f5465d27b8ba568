import logging
import pickle
from logging import Logger
from pathlib import Path
from typing import Any, Optional

import torch

from .config import RunConfig
from .const import CHECKPOINT_VERSION
from .exceptions import CheckpointIncompatibleError
from .experts import MultiExpertModel
from .fileio import atomic_path

logger: Logger = logging.getLogger(__package__)


def save_checkpoint(model: MultiExpertModel, config: RunConfig, path: Path) -> Path:
    """Writes stage, head and overall classifier weights plus the run config.

    The file is written next to its destination and renamed into place.
    """
    payload: dict[str, Any] = {
        "format_version": CHECKPOINT_VERSION,
        "expert_count": model.expert_count,
        "config": config.serialize(),
        "model_state_dict": model.state_dict(),
    }
    with atomic_path(path) as tmp:
        torch.save(payload, tmp)
    logger.info("Saved checkpoint %s", path)
    return path


def load_checkpoint(
    path: Path,
    expert_count: Optional[int] = None,
) -> tuple[MultiExpertModel, RunConfig]:
    """Rebuilds the model recorded in a checkpoint.

    Raises CheckpointIncompatibleError on an unreadable or foreign file, a format
    version mismatch, or when ``expert_count`` is given and differs from the
    checkpoint's.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as err:
        raise CheckpointIncompatibleError(f"Cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict):
        raise CheckpointIncompatibleError(f"Checkpoint {path} does not hold a checkpoint payload")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointIncompatibleError(
            f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}"
        )
    missing = [k for k in ("expert_count", "config", "model_state_dict") if k not in payload]
    if missing:
        raise CheckpointIncompatibleError(f"Checkpoint {path} lacks {', '.join(missing)}")
    if expert_count is not None and payload["expert_count"] != expert_count:
        raise CheckpointIncompatibleError(
            f"Checkpoint {path} holds {payload['expert_count']} experts, expected {expert_count}"
        )
    config = RunConfig.parse(payload["config"])
    model = config.build_model(initial_weights=False)
    try:
        model.load_state_dict(payload["model_state_dict"])
    except RuntimeError as err:
        raise CheckpointIncompatibleError(f"Checkpoint {path} does not fit its config: {err}") from err
    model.eval()
    logger.info("Loaded checkpoint %s with %d experts", path, model.expert_count)
    return model, config
