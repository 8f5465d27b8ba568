import json
import logging
import math
from logging import Logger
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader, Dataset

from .attention import MaskConfig, RegionSet, propose_regions
from .const import (
    BATCH_SIZE,
    EPOCHS,
    LEARNING_RATE,
    MOMENTUM,
    PATIENCE,
    THRESHOLD,
    WEIGHT_DECAY,
    EpochRecord,
    Schedule,
)
from .exceptions import (
    ConfigurationError,
    DatasetError,
    EmptyInputError,
    NonFiniteLossError,
    SequencingError,
)
from .experts import MultiExpertModel
from .fileio import write_text_atomic

logger: Logger = logging.getLogger(__package__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings of the multi-step training loop.

    Attributes
    ----------
    expert_count : int
        number of experts N
    pool_includes_self : bool
        whether expert n may draw its own region A_n in its step
    per_image_draw : bool
        draw the pool entry per image instead of once per batch
    schedule : str
        "mutual" runs the N+2 steps, "plain" only the raw-input overall step
    """

    expert_count: int
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    patience: int = PATIENCE
    seed: int = 0
    threshold: float = THRESHOLD
    pool_includes_self: bool = True
    per_image_draw: bool = False
    schedule: Schedule = "mutual"

    def __post_init__(self) -> None:
        if self.expert_count < 1:
            raise ConfigurationError("At least one expert is required")
        if self.learning_rate <= 0:
            raise ConfigurationError("Learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("Batch size must be at least 1")
        if self.epochs < 1:
            raise ConfigurationError("Epoch budget must be at least 1")
        if self.schedule not in ("mutual", "plain"):
            raise ConfigurationError(f"Unknown schedule {self.schedule!r}")


class TraceRecord(NamedTuple):
    step_index: int
    trained_component: str
    input_source: str


@dataclass
class IterationTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, component: str, source: str) -> None:
        self.records.append(TraceRecord(len(self.records) + 1, component, source))

    def components(self) -> list[str]:
        return [r.trained_component for r in self.records]

    def validate(self, expert_count: int) -> None:
        """Checks e_N, e_{N-1} .. e_1, joint, concat ordering."""
        expected = [f"e{n}" for n in range(expert_count, 0, -1)] + ["joint", "concat"]
        if self.components() != expected:
            raise SequencingError(
                f"Iteration ran {self.components()}, expected {expected}"
            )
        if self.records[0].input_source != "raw":
            raise SequencingError("The deepest expert must train on the raw input")
        if self.records[-2].input_source != "A_oval":
            raise SequencingError("The joint step must train on A_oval")
        if self.records[-1].input_source != "raw":
            raise SequencingError("The concatenation step must train on the raw input")


@dataclass
class BatchResult:
    losses: dict[str, float]
    trace: IterationTrace


def select_augmented_input(
    raw: Tensor,
    regions: Optional[RegionSet],
    rng: np.random.Generator,
    exclude: Optional[int] = None,
    per_image: bool = False,
) -> tuple[Tensor, str]:
    """Draws uniformly from the pool {raw, A_1, ..., A_N}.

    ``exclude`` removes one expert's own region from the pool. Returns the chosen
    batch and a label of its source ("raw", "A<n>" or "mixed").
    """
    if regions is None:
        raise SequencingError("Attention regions are produced by the deepest expert step")
    pool: list[tuple[str, Tensor]] = [("raw", raw)]
    pool.extend(
        (f"A{n}", crop)
        for n, crop in enumerate(regions.expert_crops, start=1)
        if n != exclude
    )
    if not per_image:
        label, batch = pool[int(rng.integers(len(pool)))]
        return batch, label

    choices = torch.as_tensor(rng.integers(len(pool), size=raw.shape[0]))
    stacked = torch.stack([batch for _, batch in pool])
    return stacked[choices, torch.arange(raw.shape[0])], "mixed"


class MutualLearner:
    """Runs the per-batch training schedule on a MultiExpertModel.

    Methods
    -------
    train_step_deepest(images, targets):
        trains expert N on the raw input and proposes this batch's attention regions
    train_step_shallow(n, inputs, targets):
        trains expert n on an input drawn from the region pool
    train_step_joint(targets, a_oval):
        trains every expert and the overall classifier on A_oval in one pass
    train_step_concat(images, targets):
        trains the overall classifier on the raw input
    train_batch(images, targets):
        runs the whole schedule and returns losses and the iteration trace
    """

    def __init__(
        self,
        model: MultiExpertModel,
        config: TrainConfig,
        optimizer: Optional[torch.optim.Optimizer] = None,
    ) -> None:
        if config.expert_count != model.expert_count:
            raise ConfigurationError(
                f"Config has {config.expert_count} experts, model has {model.expert_count}"
            )
        self.model = model
        self.config = config
        self.mask_config = MaskConfig(config.threshold)
        self.optimizer = optimizer or torch.optim.SGD(
            model.parameters(),
            lr=config.learning_rate,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self._regions: Optional[RegionSet] = None
        self._trace = IterationTrace()

    @property
    def regions(self) -> Optional[RegionSet]:
        return self._regions

    def _train_mode(self, experts: Sequence[int], stages: int) -> None:
        # batch statistics only update in the components this step trains
        self.model.eval()
        for stage in self.model.backbone.stages[:stages]:
            stage.train()
        for n in experts:
            self.model.head(n).train()

    def _backprop(self, loss: Tensor, step: str) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"Loss of step {step} is {value}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return value

    def _check_targets(self, images: Tensor, targets: Tensor) -> None:
        if images.dim() != 4 or images.shape[0] == 0:
            raise EmptyInputError("Training batch is empty")
        if targets.shape[0] != images.shape[0]:
            raise DatasetError("Images and targets differ in batch size")
        if targets.min() < 0 or targets.max() >= self.model.num_classes:
            raise DatasetError(
                f"Targets outside 0..{self.model.num_classes - 1} in training batch"
            )

    def loss_deepest(self, images: Tensor, targets: Tensor) -> tuple[Tensor, RegionSet]:
        self._check_targets(images, targets)
        n = self.model.expert_count
        self._train_mode([n], self.model.backbone.spec.stage_count)
        outputs = self.model.experts(images)
        loss = F.cross_entropy(outputs[-1].scores, targets)
        regions = propose_regions(
            images,
            [o.activation for o in outputs],
            [self.model.class_rows(o).detach() for o in outputs],
            self.mask_config,
        )
        return loss, regions

    def loss_shallow(self, n: int, inputs: Tensor, targets: Tensor) -> Tensor:
        if not 1 <= n <= self.model.expert_count - 1:
            raise ConfigurationError(
                f"Shallow expert index {n} outside 1..{self.model.expert_count - 1}"
            )
        self._train_mode([n], self.model.spans[n - 1].terminal_stage)
        (output,) = self.model.experts(inputs, only=n)
        return F.cross_entropy(output.scores, targets)

    def loss_joint(self, a_oval: Tensor, targets: Tensor) -> Tensor:
        self.model.train()
        out = self.model(a_oval)
        terms = [F.cross_entropy(scores, targets) for scores in out.all_scores()]
        return torch.stack(terms).sum()

    def loss_concat(self, images: Tensor, targets: Tensor) -> Tensor:
        self.model.train()
        return F.cross_entropy(self.model(images).overall_scores, targets)

    def train_step_deepest(self, images: Tensor, targets: Tensor) -> tuple[float, RegionSet]:
        loss, regions = self.loss_deepest(images, targets)
        value = self._backprop(loss, f"e{self.model.expert_count}")
        self._regions = regions
        self._trace.append(f"e{self.model.expert_count}", "raw")
        return value, regions

    def select_augmented_input(self, raw: Tensor, n: Optional[int] = None) -> tuple[Tensor, str]:
        exclude = None if self.config.pool_includes_self else n
        return select_augmented_input(
            raw, self._regions, self.rng, exclude, self.config.per_image_draw
        )

    def train_step_shallow(
        self, n: int, inputs: Tensor, targets: Tensor, source: str = "raw"
    ) -> float:
        value = self._backprop(self.loss_shallow(n, inputs, targets), f"e{n}")
        self._trace.append(f"e{n}", source)
        return value

    def train_step_joint(self, targets: Tensor, a_oval: Optional[Tensor] = None) -> float:
        if a_oval is None:
            if self._regions is None:
                raise SequencingError("A_oval is produced by the deepest expert step")
            a_oval = self._regions.overall_crop
        value = self._backprop(self.loss_joint(a_oval, targets), "joint")
        self._trace.append("joint", "A_oval")
        return value

    def train_step_concat(self, images: Tensor, targets: Tensor) -> float:
        self._check_targets(images, targets)
        value = self._backprop(self.loss_concat(images, targets), "concat")
        self._trace.append("concat", "raw")
        return value

    def train_batch(self, images: Tensor, targets: Tensor) -> BatchResult:
        self._trace = IterationTrace()
        self._regions = None
        losses: dict[str, float] = {}

        if self.config.schedule == "plain":
            losses["concat"] = self.train_step_concat(images, targets)
            return BatchResult(losses, self._trace)

        n_experts = self.model.expert_count
        losses[f"e{n_experts}"], _ = self.train_step_deepest(images, targets)
        for n in range(n_experts - 1, 0, -1):
            inputs, source = self.select_augmented_input(images, n)
            losses[f"e{n}"] = self.train_step_shallow(n, inputs, targets, source)
        losses["joint"] = self.train_step_joint(targets)
        losses["concat"] = self.train_step_concat(images, targets)

        self._trace.validate(n_experts)
        # regions never outlive the batch that produced them
        self._regions = None
        return BatchResult(losses, self._trace)


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: Optional[float] = None
    stopped_early: bool = False

    def to_lines(self) -> str:
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in self.epochs)

    def write(self, path: Path) -> None:
        write_text_atomic(path, self.to_lines())


@torch.no_grad()
def overall_accuracy(model: MultiExpertModel, loader: DataLoader[tuple[Tensor, Tensor]]) -> float:
    """Percent of samples whose overall classifier prediction on the raw input is right."""
    model.eval()
    correct = 0
    total = 0
    for images, targets in loader:
        scores = model(images).overall_scores
        correct += int((scores.argmax(dim=-1) == targets).sum())
        total += int(targets.shape[0])
    if total == 0:
        raise EmptyInputError("Validation set is empty")
    return 100.0 * correct / total


def fit(
    model: MultiExpertModel,
    train_data: Dataset[tuple[Tensor, Tensor]],
    config: TrainConfig,
    val_data: Optional[Dataset[tuple[Tensor, Tensor]]] = None,
    log_path: Optional[Path] = None,
    on_improvement: Optional[Callable[[MultiExpertModel, int], None]] = None,
) -> tuple[MultiExpertModel, TrainingLog]:
    """Trains ``model`` for up to ``config.epochs`` epochs with early stopping.

    The learning rate follows a cosine annealing curve over the epoch budget. When
    validation data is given, the weights of the best epoch are restored at the end
    and ``on_improvement`` is called whenever validation accuracy improves.
    """
    torch.manual_seed(config.seed)
    learner = MutualLearner(model, config)
    scheduler = CosineAnnealingLR(learner.optimizer, T_max=config.epochs)
    size = len(train_data)  # type: ignore[arg-type]
    if size == 0:
        raise EmptyInputError("Training set is empty")
    loader = DataLoader(
        train_data,
        batch_size=config.batch_size,
        shuffle=True,
        drop_last=size > config.batch_size,
        generator=torch.Generator().manual_seed(config.seed),
    )
    val_loader = (
        DataLoader(val_data, batch_size=config.batch_size) if val_data is not None else None
    )

    log = TrainingLog()
    best_state: Optional[dict[str, Tensor]] = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        learning_rate = float(learner.optimizer.param_groups[0]["lr"])
        sums: dict[str, float] = {}
        batches = 0
        for images, targets in loader:
            result = learner.train_batch(images, targets)
            for key, value in result.losses.items():
                sums[key] = sums.get(key, 0.0) + value
            batches += 1
        scheduler.step()
        model.mark_fitted()

        val_accuracy = (
            overall_accuracy(model, val_loader) if val_loader is not None else None
        )
        record: EpochRecord = {
            "epoch": epoch,
            "learning_rate": learning_rate,
            "step_losses": {k: v / max(batches, 1) for k, v in sums.items()},
            "val_accuracy": val_accuracy,
        }
        log.epochs.append(record)
        logger.info(
            "Epoch %d lr %.6f losses %s val accuracy %s",
            epoch,
            learning_rate,
            {k: round(v, 4) for k, v in record["step_losses"].items()},
            "n/a" if val_accuracy is None else f"{val_accuracy:.2f}",
        )
        if log_path is not None:
            log.write(log_path)

        if val_accuracy is None:
            continue
        if log.best_accuracy is None or val_accuracy > log.best_accuracy:
            log.best_accuracy = val_accuracy
            log.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
            if on_improvement is not None:
                on_improvement(model, epoch)
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("Stopping early after epoch %d", epoch)
                log.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log
