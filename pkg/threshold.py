"""
Confidence thresholding: sweep curves, matching a human accuracy target,
two-stage automation accounting and the labor-savings estimate.

An example is retained at threshold t when its confidence (the largest
probability of the relevant head) is >= t. Everything retained is labeled
automatically; the rest goes to people.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from artifacts import atomic_write_text  # noqa: E402
from domain import BinaryPrediction, MultiTaskPrediction, OneStagePrediction, Prediction  # noqa: E402
from errors import DataError, DimensionError, UnattainableTargetError  # noqa: E402

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(i / 100, 2) for i in range(100))
HUMAN_SPECIES_ACCURACY = 0.966
HUMAN_COUNT_ACCURACY = 0.900
DEFAULT_EMPTY_FRACTION = 0.75
METRICS = ("top1", "top5", "within_one_bin")


class Task(Enum):
    EMPTY_VS_ANIMAL = "empty_vs_animal"
    IDENTIFICATION = "identification"
    COUNTING = "counting"


# Metric (and secondary metric) per task, as plotted in the sweep charts.
TASK_METRICS = {
    Task.EMPTY_VS_ANIMAL: ("top1", None),
    Task.IDENTIFICATION: ("top1", "top5"),
    Task.COUNTING: ("top1", "within_one_bin"),
}


# ============================================================================
# CONFIDENCE
# ============================================================================

def confidence(pred: Prediction, head: str = "species") -> float:
    """Largest class probability of the head that decides the task."""
    if isinstance(pred, BinaryPrediction):
        return max(pred.p_animal, pred.p_empty)
    if isinstance(pred, OneStagePrediction):
        return float(pred.class_probs.max())
    if isinstance(pred, MultiTaskPrediction):
        return float((pred.count_probs if head == "count" else pred.species_probs).max())
    raise DataError(f"no confidence for {type(pred).__name__}")


def confidences(probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64).max(axis=1)


def hits(probs: np.ndarray, labels: np.ndarray, metric: str) -> np.ndarray:
    """Per-example correctness under `metric`."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if metric == "top1":
        return np.argmax(p, axis=1) == y
    if metric == "top5":
        top = np.argsort(-p, axis=1, kind="stable")[:, :min(5, p.shape[1])]
        return np.any(top == y[:, None], axis=1)
    if metric == "within_one_bin":
        return np.abs(np.argmax(p, axis=1) - y) <= 1
    raise DataError(f"metric must be one of {METRICS}, got {metric!r}")


# ============================================================================
# SWEEP
# ============================================================================

@dataclass(frozen=True)
class ThresholdPoint:
    threshold: float
    retained_fraction: float
    # None when nothing is retained.
    accuracy: float | None
    secondary_metric: float | None = None


@dataclass(frozen=True)
class ThresholdCurve:
    task: str
    metric: str
    secondary: str | None
    points: tuple[ThresholdPoint, ...]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(p.threshold, p.retained_fraction, p.accuracy, p.secondary_metric) for p in self.points],
            columns=["threshold", "retained_fraction", "accuracy", "secondary_metric"],
        )

    @property
    def max_accuracy(self) -> float | None:
        values = [p.accuracy for p in self.points if p.accuracy is not None]
        return max(values) if values else None


def _check_grid(thresholds: Sequence[float]) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise DataError("threshold grid is empty")
    if np.any(np.diff(t) <= 0):
        raise DataError("thresholds must be strictly increasing")
    if t[0] < 0 or t[-1] > 1:
        raise DataError("thresholds must lie in [0, 1]")
    return t


def sweep(preds, labels, thresholds: Sequence[float] = DEFAULT_GRID, metric: str = "top1",
          secondary: str | None = None, task: str = "") -> ThresholdCurve:
    """Retained fraction and metric on the retained examples for each threshold."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or len(p) != len(y):
        raise DimensionError(f"{p.shape} predictions for {y.shape} labels")
    if len(p) == 0:
        raise DataError("cannot sweep an empty prediction set")
    grid = _check_grid(thresholds)

    conf = confidences(p)
    ok = hits(p, y, metric)
    ok2 = hits(p, y, secondary) if secondary else None
    n = len(y)
    points = []
    for t in grid:
        kept = conf >= t
        n_kept = int(kept.sum())
        points.append(ThresholdPoint(
            threshold=float(t),
            retained_fraction=n_kept / n,
            accuracy=float(ok[kept].mean()) if n_kept else None,
            secondary_metric=float(ok2[kept].mean()) if n_kept and ok2 is not None else None,
        ))
    return ThresholdCurve(task, metric, secondary, tuple(points))


# ============================================================================
# AUTOMATION
# ============================================================================

@dataclass(frozen=True)
class AutomationSummary:
    task: Task
    matched_threshold: float
    automated_fraction_of_stage: float
    total_automated_fraction: float
    target_accuracy: float
    achieved_accuracy: float

    def to_json(self) -> dict:
        return {
            "task": self.task.value,
            "matched_threshold": self.matched_threshold,
            "automated_fraction_of_stage": self.automated_fraction_of_stage,
            "total_automated_fraction": self.total_automated_fraction,
            "target_accuracy": self.target_accuracy,
            "achieved_accuracy": self.achieved_accuracy,
        }


def match_curve(curve: ThresholdCurve, target_accuracy: float, task: Task) -> AutomationSummary:
    for point in curve.points:
        if point.accuracy is not None and point.accuracy >= target_accuracy:
            return AutomationSummary(task, point.threshold, point.retained_fraction,
                                     point.retained_fraction, target_accuracy, point.accuracy)
    raise UnattainableTargetError(target_accuracy, curve.max_accuracy)


def match_human(preds, labels, target_accuracy: float, metric: str = "top1",
                thresholds: Sequence[float] = DEFAULT_GRID,
                task: Task = Task.IDENTIFICATION) -> AutomationSummary:
    """Smallest grid threshold whose retained-set metric reaches the target."""
    if not 0.0 <= target_accuracy <= 1.0:
        raise DataError(f"target accuracy must be in [0, 1], got {target_accuracy}")
    return match_curve(sweep(preds, labels, thresholds, metric, task=task.value), target_accuracy, task)


def stage1_automation(binary_probs, labels, human_accuracy: float = HUMAN_SPECIES_ACCURACY,
                      thresholds: Sequence[float] = DEFAULT_GRID) -> AutomationSummary:
    """
    The whole stage is automated when the gate's overall accuracy already
    reaches human accuracy; otherwise the binary head is thresholded like any
    other task.
    """
    p = np.asarray(binary_probs, dtype=np.float64)
    overall = float(hits(p, labels, "top1").mean())
    if overall >= human_accuracy:
        return AutomationSummary(Task.EMPTY_VS_ANIMAL, 0.0, 1.0, 1.0, human_accuracy, overall)
    log.info(f"Stage-1 accuracy {overall:.4f} below human {human_accuracy:.4f}; thresholding the gate")
    return match_human(p, labels, human_accuracy, "top1", thresholds, Task.EMPTY_VS_ANIMAL)


def _check_fraction(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise DataError(f"{name} must be in [0, 1], got {x}")


def compose_two_stage(empty_fraction: float, stage1_auto_fraction: float, stage2_auto_fraction: float) -> float:
    """Share of all images labeled without people across both stages."""
    _check_fraction("empty_fraction", empty_fraction)
    _check_fraction("stage1_auto_fraction", stage1_auto_fraction)
    _check_fraction("stage2_auto_fraction", stage2_auto_fraction)
    return empty_fraction * stage1_auto_fraction + (1.0 - empty_fraction) * stage2_auto_fraction


# ============================================================================
# LABOR
# ============================================================================

@dataclass(frozen=True)
class LaborModel:
    baseline_hours: float = 14.6 * 52 * 40
    baseline_images: int = 5_500_000
    corpus_images: int = 3_200_000
    hours_per_week: float = 40.0

    def __post_init__(self):
        for name in ("baseline_hours", "baseline_images", "corpus_images", "hours_per_week"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def hours_per_image(self) -> float:
        return self.baseline_hours / self.baseline_images


class LaborSavings(NamedTuple):
    hours_saved: float
    person_years_saved: float


def labor_savings(model: LaborModel, automated_fraction: float) -> LaborSavings:
    _check_fraction("automated_fraction", automated_fraction)
    hours = model.corpus_images * automated_fraction * model.hours_per_image
    return LaborSavings(hours, hours / (52 * model.hours_per_week))


# ============================================================================
# EXPORT
# ============================================================================

def write_curve_csv(curve: ThresholdCurve, path: str | Path) -> Path:
    return atomic_write_text(path, curve.frame().to_csv(index=False))


def write_curve_svg(curve: ThresholdCurve, path: str | Path, target: float | None = None) -> Path:
    """Accuracy and retained fraction against threshold."""
    plt.rcParams["svg.hashsalt"] = "camtrap"
    frame = curve.frame()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(frame["threshold"], frame["accuracy"].astype(float), label=f"{curve.metric} on retained")
    if curve.secondary:
        ax.plot(frame["threshold"], frame["secondary_metric"].astype(float),
                label=f"{curve.secondary} on retained", linestyle="--")
    ax.plot(frame["threshold"], frame["retained_fraction"], label="retained fraction", color="gray")
    if target is not None:
        ax.axhline(target, color="red", linewidth=0.8, linestyle=":", label=f"target {target:.3f}")
    ax.set_xlabel("confidence threshold")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(curve.task or curve.metric)
    ax.legend(loc="lower left")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    tmp.replace(path)
    return path
