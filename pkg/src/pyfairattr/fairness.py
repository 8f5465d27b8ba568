import json
import logging
from logging import Logger
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from .const import SubgroupEntry
from .exceptions import (
    DegenerateMetricError,
    EmptyInputError,
    FairAttrError,
    ManifestValidationError,
    UndefinedMetricError,
    UnsupportedArityError,
)
from .fileio import atomic_path, write_text_atomic

logger: Logger = logging.getLogger(__package__)

SubgroupKey = tuple[str, ...]


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    true_label: int
    predicted_label: int
    subgroup: SubgroupKey

    def __post_init__(self) -> None:
        if not self.subgroup:
            raise ManifestValidationError([f"Record {self.sample_id} has no subgroup"])


def _arrays(records: Sequence[EvalRecord]) -> tuple[np.ndarray, np.ndarray, list[SubgroupKey]]:
    if not records:
        raise EmptyInputError("No evaluation records")
    arities = {len(r.subgroup) for r in records}
    if len(arities) != 1:
        raise ManifestValidationError(["Subgroup keys differ in arity"])
    y_true = np.array([r.true_label for r in records])
    y_pred = np.array([r.predicted_label for r in records])
    return y_true, y_pred, [r.subgroup for r in records]


def _group_masks(
    groups: list[SubgroupKey],
    expected: Optional[Iterable[SubgroupKey]] = None,
) -> dict[SubgroupKey, np.ndarray]:
    present = sorted(set(groups))
    for key in sorted(set(expected or ()) - set(present)):
        logger.warning("Subgroup %s has no records and is excluded", "/".join(key))
    return {key: np.array([g == key for g in groups]) for key in present}


def overall_accuracy(records: Sequence[EvalRecord]) -> float:
    y_true, y_pred, _ = _arrays(records)
    return 100.0 * float(np.mean(y_true == y_pred))


def subgroup_accuracy(
    records: Sequence[EvalRecord],
    subgroups: Optional[Iterable[SubgroupKey]] = None,
) -> dict[SubgroupKey, float]:
    """Percent correct per subgroup. Declared ``subgroups`` without records are dropped."""
    y_true, y_pred, groups = _arrays(records)
    return {
        key: 100.0 * float(np.mean(y_true[mask] == y_pred[mask]))
        for key, mask in _group_masks(groups, subgroups).items()
    }


def degree_of_bias(accs: Sequence[float], ddof: int = 0) -> float:
    """Standard deviation of subgroup accuracies (population by default)."""
    if len(accs) < 2:
        raise UndefinedMetricError("Degree of bias needs at least two subgroups")
    return float(np.std(np.asarray(accs, dtype=float), ddof=ddof))


def max_min_ratio(accs: Sequence[float]) -> float:
    if not accs:
        raise UndefinedMetricError("Max/min ratio needs at least one subgroup")
    values = np.asarray(accs, dtype=float)
    if np.any(values <= 0):
        raise DegenerateMetricError(
            "Max/min ratio is undefined when a subgroup has zero accuracy"
        )
    return float(values.max() / values.min())


def _rates(
    y_true: np.ndarray, y_pred: np.ndarray, positive_class: int
) -> tuple[Optional[float], Optional[float]]:
    """TPR and FPR in percent for one group, None where the outcome is absent."""
    cm = confusion_matrix(
        y_true == positive_class, y_pred == positive_class, labels=[False, True]
    )
    (tn, fp), (fn, tp) = cm
    tpr = 100.0 * tp / (tp + fn) if tp + fn else None
    fpr = 100.0 * fp / (fp + tn) if fp + tn else None
    return tpr, fpr


def subgroup_tpr(
    records: Sequence[EvalRecord],
    positive_class: int = 1,
    subgroups: Optional[Iterable[SubgroupKey]] = None,
) -> dict[SubgroupKey, float]:
    y_true, y_pred, groups = _arrays(records)
    result: dict[SubgroupKey, float] = {}
    for key, mask in _group_masks(groups, subgroups).items():
        tpr, _ = _rates(y_true[mask], y_pred[mask], positive_class)
        if tpr is None:
            logger.warning(
                "Subgroup %s has no positive records and is excluded from TPR",
                "/".join(key),
            )
            continue
        result[key] = tpr
    return result


def _two_group_rates(
    records: Sequence[EvalRecord], positive_class: int
) -> list[tuple[Optional[float], Optional[float]]]:
    y_true, y_pred, groups = _arrays(records)
    masks = _group_masks(groups)
    if len(masks) != 2:
        raise UnsupportedArityError(
            f"Equal opportunity metrics need exactly 2 protected groups, got {len(masks)}"
        )
    return [_rates(y_true[m], y_pred[m], positive_class) for m in masks.values()]


def deo(records: Sequence[EvalRecord], positive_class: int = 1) -> float:
    """Absolute TPR gap between the two protected groups."""
    (tpr_a, _), (tpr_b, _) = _two_group_rates(records, positive_class)
    if tpr_a is None or tpr_b is None:
        raise UndefinedMetricError("A protected group has no positive records")
    return abs(tpr_a - tpr_b)


def deodds(records: Sequence[EvalRecord], positive_class: int = 1) -> float:
    """TPR gap plus FPR gap between the two protected groups."""
    (tpr_a, fpr_a), (tpr_b, fpr_b) = _two_group_rates(records, positive_class)
    if tpr_a is None or tpr_b is None or fpr_a is None or fpr_b is None:
        raise UndefinedMetricError("Both outcomes must occur in both protected groups")
    return abs(tpr_a - tpr_b) + abs(fpr_a - fpr_b)


@dataclass
class SubgroupReport:
    """Accuracy and fairness summary of one record set.

    Metrics that are undefined for the input are None and explained in ``errors``.
    """

    subgroups: list[SubgroupEntry]
    overall_accuracy: float
    degree_of_bias: Optional[float] = None
    max_min_ratio: Optional[float] = None
    deo: Optional[float] = None
    deodds: Optional[float] = None
    max_accuracy: Optional[float] = None
    min_accuracy: Optional[float] = None
    max_accuracy_group: Optional[list[str]] = None
    min_accuracy_group: Optional[list[str]] = None
    max_tpr: Optional[float] = None
    min_tpr: Optional[float] = None
    max_tpr_group: Optional[list[str]] = None
    min_tpr_group: Optional[list[str]] = None
    positive_class: int = 1
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "subgroups": [dict(entry) for entry in self.subgroups],
            "overall_accuracy": self.overall_accuracy,
            "degree_of_bias": self.degree_of_bias,
            "max_min_ratio": self.max_min_ratio,
            "deo": self.deo,
            "deodds": self.deodds,
            "max_accuracy": self.max_accuracy,
            "min_accuracy": self.min_accuracy,
            "max_accuracy_group": self.max_accuracy_group,
            "min_accuracy_group": self.min_accuracy_group,
            "max_tpr": self.max_tpr,
            "min_tpr": self.min_tpr,
            "max_tpr_group": self.max_tpr_group,
            "min_tpr_group": self.min_tpr_group,
            "positive_class": self.positive_class,
            "errors": dict(self.errors),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SubgroupReport":
        subgroups: list[SubgroupEntry] = [
            {
                "subgroup": list(entry["subgroup"]),
                "count": int(entry["count"]),
                "accuracy": float(entry["accuracy"]),
                "tpr": None if entry["tpr"] is None else float(entry["tpr"]),
            }
            for entry in data["subgroups"]
        ]
        rest = {k: v for k, v in data.items() if k != "subgroups"}
        return cls(subgroups=subgroups, **rest)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SubgroupReport":
        return cls.from_dict(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        """Per-subgroup table with accuracies rounded to 2 decimals."""
        frame = pd.DataFrame(
            {
                "subgroup": ["/".join(e["subgroup"]) for e in self.subgroups],
                "count": [e["count"] for e in self.subgroups],
                "accuracy": [e["accuracy"] for e in self.subgroups],
                "tpr": [e["tpr"] for e in self.subgroups],
            }
        )
        return frame.round({"accuracy": 2, "tpr": 2})


def _extremes(values: dict[SubgroupKey, float]) -> tuple[float, list[str], float, list[str]]:
    high = max(values, key=lambda k: values[k])
    low = min(values, key=lambda k: values[k])
    return values[high], list(high), values[low], list(low)


def build_report(
    records: Sequence[EvalRecord],
    positive_class: int = 1,
    ddof: int = 0,
) -> SubgroupReport:
    accuracies = subgroup_accuracy(records)
    tprs = subgroup_tpr(records, positive_class)
    counts: dict[SubgroupKey, int] = {}
    for record in records:
        counts[record.subgroup] = counts.get(record.subgroup, 0) + 1

    report = SubgroupReport(
        subgroups=[
            {
                "subgroup": list(key),
                "count": counts[key],
                "accuracy": acc,
                "tpr": tprs.get(key),
            }
            for key, acc in accuracies.items()
        ],
        overall_accuracy=overall_accuracy(records),
        positive_class=positive_class,
    )
    (
        report.max_accuracy,
        report.max_accuracy_group,
        report.min_accuracy,
        report.min_accuracy_group,
    ) = _extremes(accuracies)
    if tprs:
        report.max_tpr, report.max_tpr_group, report.min_tpr, report.min_tpr_group = (
            _extremes(tprs)
        )

    acc_values = list(accuracies.values())
    metrics = {
        "degree_of_bias": lambda: degree_of_bias(acc_values, ddof),
        "max_min_ratio": lambda: max_min_ratio(acc_values),
        "deo": lambda: deo(records, positive_class),
        "deodds": lambda: deodds(records, positive_class),
    }
    for name, compute in metrics.items():
        try:
            setattr(report, name, compute())
        except FairAttrError as err:
            logger.warning("%s not reported: %s", name, err)
            report.errors[name] = str(err)
    return report


def write_report(report: SubgroupReport, json_path: Path, csv_path: Optional[Path] = None) -> None:
    write_text_atomic(json_path, report.to_json())
    if csv_path is not None:
        with atomic_path(csv_path) as tmp:
            report.to_frame().to_csv(tmp, index=False)


def load_predictions(path: Path, protected: Sequence[str]) -> list[EvalRecord]:
    """Reads a predictions CSV (id, true_label, predicted_label, protected columns...).

    Protected values are kept verbatim, so "NA" or "None" stay group names.
    """
    text_columns = {"id": str, **{c: str for c in protected}}
    try:
        frame = pd.read_csv(path, dtype=text_columns, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise ManifestValidationError([f"Cannot read predictions {path}: {err}"]) from err
    missing = [
        column
        for column in ["id", "true_label", "predicted_label", *protected]
        if column not in frame.columns
    ]
    if missing:
        raise ManifestValidationError([f"Missing column {c!r} in {path}" for c in missing])
    if not protected:
        raise ManifestValidationError(["At least one protected column is required"])

    records: list[EvalRecord] = []
    errors: list[str] = []
    for number, (_, row) in enumerate(frame.iterrows(), start=2):
        try:
            true_label = int(row["true_label"])
            predicted_label = int(row["predicted_label"])
        except ValueError:
            errors.append(f"row {number}: labels must be integers")
            continue
        records.append(
            EvalRecord(
                sample_id=str(row["id"]),
                true_label=true_label,
                predicted_label=predicted_label,
                subgroup=tuple(str(row[c]) for c in protected),
            )
        )
    if errors:
        raise ManifestValidationError(errors)
    return records
