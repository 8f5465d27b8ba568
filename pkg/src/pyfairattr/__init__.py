"""Multi-expert CAM-attention classifier with subgroup fairness reporting."""
from .config import RunConfig
from .exceptions import FairAttrError
from .experts import MultiExpertModel
from .fairness import SubgroupReport, build_report
from .inference import predict_fused
from .training import fit

__version__ = "2026.10.0"

__all__ = [
    "FairAttrError",
    "MultiExpertModel",
    "RunConfig",
    "SubgroupReport",
    "build_report",
    "fit",
    "predict_fused",
]
