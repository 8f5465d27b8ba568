"""Small models and fixtures shared by the test modules."""
from typing import Sequence

import torch
from torch import Tensor

from src.pyfairattr.backbone import build_backbone
from src.pyfairattr.experts import MultiExpertModel, build_model


def micro_model(
    spans: Sequence[int] = (1, 2, 3),
    descriptor_length: int = 4,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> MultiExpertModel:
    """Three 4-channel stages on 8x8 inputs, well under 2000 parameters."""
    torch.manual_seed(seed)
    backbone = build_backbone("micro", input_size=8)
    return build_model(backbone, spans, 2, descriptor_length).to(dtype)


def toy_model(
    spans: Sequence[int] = (3, 4, 5),
    input_size: int = 32,
    descriptor_length: int = 8,
    seed: int = 0,
) -> MultiExpertModel:
    torch.manual_seed(seed)
    backbone = build_backbone("toy", input_size=input_size)
    return build_model(backbone, spans, 2, descriptor_length)


def batch(
    count: int = 4,
    size: int = 8,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> tuple[Tensor, Tensor]:
    generator = torch.Generator().manual_seed(seed)
    images = torch.randn(count, 3, size, size, generator=generator, dtype=dtype)
    targets = torch.arange(count) % 2
    return images, targets
