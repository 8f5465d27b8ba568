from typing import Literal, TypedDict

PoolingKind = Literal["max", "avg"]
FusionMode = Literal["logits", "softmax"]
Schedule = Literal["mutual", "plain"]
InputKind = Literal["raw", "region"]

OVERALL: Literal["overall"] = "overall"

INPUT_SIZE: int = 448
THRESHOLD: float = 0.5
DESCRIPTOR_LENGTH: int = 512

LEARNING_RATE: float = 0.002
MOMENTUM: float = 0.9
WEIGHT_DECAY: float = 5e-4
BATCH_SIZE: int = 16
EPOCHS: int = 30
PATIENCE: int = 5

IMAGENET_MEAN: tuple[float, float, float] = (0.485, 0.456, 0.406)
IMAGENET_STD: tuple[float, float, float] = (0.229, 0.224, 0.225)

# resnet50 grouped into 5 stages, experts end at stages 3, 4 and 5
RESNET50_SPANS: tuple[int, ...] = (3, 4, 5)

CHECKPOINT_VERSION: int = 1

# blue -> green -> yellow -> red, low to high attention
HEATMAP_RAMP: tuple[tuple[float, float, float], ...] = (
    (0.0, 0.0, 1.0),
    (0.0, 1.0, 0.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 0.0),
)
HEATMAP_ALPHA: float = 0.5

OUTPUT_ROOT_ENV: str = "PYFAIRATTR_OUTPUT_ROOT"
SLOW_TESTS_ENV: str = "PYFAIRATTR_SLOW"

MANIFEST_PATH_COLUMN: str = "path"
MANIFEST_TARGET_COLUMN: str = "target"
MANIFEST_SPLIT_COLUMN: str = "split"
SPLITS: tuple[str, ...] = ("train", "val", "test")


class EpochRecord(TypedDict):
    epoch: int
    learning_rate: float
    step_losses: dict[str, float]
    val_accuracy: float | None


class SubgroupEntry(TypedDict):
    subgroup: list[str]
    count: int
    accuracy: float
    tpr: float | None
