"""
Evaluation metrics: top-k, within-one-bin counting accuracy, per-class
accuracy, confusion matrices and example-based multi-label scores.

Predictions are (n, k) probability arrays (or sequences of k-vectors); labels
are integer class ids. Argmax and top-k ties go to the lowest class id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from artifacts import atomic_write_text, tool_stamp, write_json
from domain import ATTRIBUTE_NAMES, COUNT_BIN_LABELS, LabelSet, Taxonomy
from errors import DataError, DimensionError

log = logging.getLogger(__name__)

ATTRIBUTE_THRESHOLD = 0.5
POOLING = ("examples", "attributes")


def _as_probs(preds: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"expected an (n, k) prediction array, got shape {p.shape}")
    return p


def _check_lengths(preds: np.ndarray, labels: np.ndarray) -> None:
    if len(preds) != len(labels):
        raise DimensionError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(preds) == 0:
        raise DataError("no examples to score")


def _ranked(p: np.ndarray) -> np.ndarray:
    return np.argsort(-p, axis=1, kind="stable")


# ============================================================================
# SINGLE-LABEL METRICS
# ============================================================================

def topk_accuracy(preds, labels, k: int) -> float:
    """Fraction of examples whose true class is among the k most probable."""
    p = _as_probs(preds)
    y = np.asarray(labels, dtype=np.int64)
    _check_lengths(p, y)
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    top = _ranked(p)[:, :min(k, p.shape[1])]
    return float(np.mean(np.any(top == y[:, None], axis=1)))


def within_one_bin(preds, labels) -> float:
    """Fraction of count predictions whose argmax bin is within one of the truth."""
    p = _as_probs(preds)
    y = np.asarray(labels, dtype=np.int64)
    _check_lengths(p, y)
    return float(np.mean(np.abs(np.argmax(p, axis=1) - y) <= 1))


def per_class_accuracy(preds, labels) -> dict[int, float]:
    """Top-1 accuracy per true class; classes with no examples are left out."""
    p = _as_probs(preds)
    y = np.asarray(labels, dtype=np.int64)
    _check_lengths(p, y)
    hit = np.argmax(p, axis=1) == y
    return {int(c): float(hit[y == c].mean()) for c in np.unique(y)}


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """counts[true, predicted]."""
    p = _as_probs(preds)
    y = np.asarray(labels, dtype=np.int64)
    _check_lengths(p, y)
    k = p.shape[1] if n_classes is None else n_classes
    if y.max() >= k:
        raise DimensionError(f"label {int(y.max())} outside {k} classes")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (y, np.argmax(p, axis=1)), 1)
    return out


# ============================================================================
# MULTI-LABEL METRICS
# ============================================================================

@dataclass(frozen=True)
class MultilabelScores:
    accuracy: float
    precision: float
    recall: float


def _set_scores(inter: np.ndarray, union: np.ndarray, n_true: np.ndarray, n_pred: np.ndarray) -> MultilabelScores:
    # Empty-set conventions: empty union scores 1; an empty predicted (true)
    # set scores precision (recall) 1 only when the other set is empty too.
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        prec = np.where(n_pred == 0, np.where(n_true == 0, 1.0, 0.0), inter / np.maximum(n_pred, 1))
        rec = np.where(n_true == 0, np.where(n_pred == 0, 1.0, 0.0), inter / np.maximum(n_true, 1))
    return MultilabelScores(float(acc.mean()), float(prec.mean()), float(rec.mean()))


def multilabel_metrics(attr_preds, attr_labels, pooled: str = "examples") -> MultilabelScores:
    """
    Example-based accuracy |Y∩Z|/|Y∪Z|, precision |Y∩Z|/|Z| and recall
    |Y∩Z|/|Y| with Z = {attributes with probability > 0.5}.

    pooled="examples" averages the per-example scores; pooled="attributes"
    treats each attribute column as a set of examples and averages over
    attributes instead.
    """
    p = _as_probs(attr_preds)
    y = np.asarray(attr_labels, dtype=bool)
    if p.shape != y.shape:
        raise DimensionError(f"attribute predictions {p.shape} vs labels {y.shape}")
    _check_lengths(p, y)
    if pooled not in POOLING:
        raise DataError(f"pooled must be one of {POOLING}, got {pooled!r}")
    z = p > ATTRIBUTE_THRESHOLD
    axis = 1 if pooled == "examples" else 0
    return _set_scores((y & z).sum(axis), (y | z).sum(axis), y.sum(axis), z.sum(axis))


def attribute_accuracy(attr_preds, attr_labels) -> np.ndarray:
    """Per attribute, the fraction of examples where the > 0.5 decision matches the truth."""
    p = _as_probs(attr_preds)
    y = np.asarray(attr_labels, dtype=bool)
    if p.shape != y.shape:
        raise DimensionError(f"attribute predictions {p.shape} vs labels {y.shape}")
    _check_lengths(p, y)
    return ((p > ATTRIBUTE_THRESHOLD) == y).mean(axis=0)


# ============================================================================
# EVAL REPORT
# ============================================================================

@dataclass
class EvalReport:
    task: str
    n_examples: int
    top1: float
    class_names: tuple[str, ...]
    confusion: np.ndarray
    per_class_accuracy: dict[str, float] = field(default_factory=dict)
    top5: float | None = None
    within_one_bin: float | None = None
    multilabel: MultilabelScores | None = None

    def to_json(self) -> dict[str, Any]:
        out = {
            "task": self.task,
            "n_examples": self.n_examples,
            "top1": self.top1,
            "top5": self.top5,
            "within_one_bin": self.within_one_bin,
            "class_names": list(self.class_names),
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
        }
        if self.multilabel is not None:
            out["multilabel"] = {"accuracy": self.multilabel.accuracy,
                                 "precision": self.multilabel.precision,
                                 "recall": self.multilabel.recall}
        return out

    def confusion_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.confusion, index=list(self.class_names), columns=list(self.class_names))
        frame.index.name = "true"
        return frame

    def per_class_frame(self) -> pd.DataFrame:
        counts = dict(zip(self.class_names, self.confusion.sum(axis=1).tolist()))
        return pd.DataFrame(
            [{"class": name, "n_examples": counts.get(name, self.n_examples), "accuracy": acc}
             for name, acc in self.per_class_accuracy.items()],
            columns=["class", "n_examples", "accuracy"],
        )


def _single_label_report(task: str, probs: np.ndarray, y: np.ndarray, names: Sequence[str],
                         top5: bool = False, within_one: bool = False) -> EvalReport:
    return EvalReport(
        task=task,
        n_examples=len(y),
        top1=topk_accuracy(probs, y, 1),
        top5=topk_accuracy(probs, y, 5) if top5 else None,
        within_one_bin=within_one_bin(probs, y) if within_one else None,
        class_names=tuple(names),
        confusion=confusion_matrix(probs, y, len(names)),
        per_class_accuracy={names[c]: acc for c, acc in per_class_accuracy(probs, y).items()},
    )


def evaluate_heads(heads: dict[str, np.ndarray], labels: Sequence[LabelSet], taxonomy: Taxonomy,
                   pooled: str = "examples") -> list[EvalReport]:
    """One EvalReport per task the heads answer. Stage-2 heads are scored on non-empty labels only."""
    for name, arr in heads.items():
        if len(arr) != len(labels):
            raise DimensionError(f"{name}: {len(arr)} predictions for {len(labels)} labels")
    reports = []
    empty = np.array([lab.empty for lab in labels], dtype=bool)

    if "binary" in heads and len(labels):
        y = empty.astype(np.int64)
        reports.append(_single_label_report("empty_vs_animal", heads["binary"], y, ("animal", "empty")))

    if "one_stage" in heads and len(labels):
        k = len(taxonomy)
        y = np.array([k if lab.empty else lab.species.id for lab in labels], dtype=np.int64)
        names = (*taxonomy.names, "empty")
        reports.append(_single_label_report("one_stage", heads["one_stage"], y, names, top5=True))

    keep = np.flatnonzero(~empty)
    if "species" in heads and keep.size:
        y = np.array([labels[i].species.id for i in keep], dtype=np.int64)
        reports.append(_single_label_report("identification", heads["species"][keep], y,
                                            taxonomy.names, top5=True))
    if "count" in heads and keep.size:
        y = np.array([labels[i].count.index for i in keep], dtype=np.int64)
        names = COUNT_BIN_LABELS[:heads["count"].shape[1]]
        reports.append(_single_label_report("counting", heads["count"][keep], y, names, within_one=True))
    if "attributes" in heads:
        with_attrs = [i for i in keep if labels[i].attributes is not None]
        if with_attrs:
            reports.append(_attribute_report(heads["attributes"][with_attrs],
                                             [labels[i].attributes.as_tuple() for i in with_attrs], pooled))
    return reports


def _attribute_report(probs: np.ndarray, flags: list[tuple[bool, ...]], pooled: str) -> EvalReport:
    n_attr = probs.shape[1]
    y = np.array(flags, dtype=bool)[:, :n_attr]
    per_attr = attribute_accuracy(probs, y)
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (y.reshape(-1).astype(int), (probs > ATTRIBUTE_THRESHOLD).reshape(-1).astype(int)), 1)
    return EvalReport(
        task="attributes",
        n_examples=len(y),
        top1=float(per_attr.mean()),
        class_names=("absent", "present"),
        confusion=confusion,
        per_class_accuracy={name: float(a) for name, a in zip(ATTRIBUTE_NAMES, per_attr)},
        multilabel=multilabel_metrics(probs, y, pooled),
    )


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, prefix: str,
                  extra: dict[str, Any] | None = None) -> Path:
    """Write <prefix>eval_report.json plus confusion / per-class CSVs per task."""
    out_dir = Path(out_dir)
    for r in reports:
        atomic_write_text(out_dir / f"{prefix}{r.task}_confusion.csv", r.confusion_frame().to_csv())
        atomic_write_text(out_dir / f"{prefix}{r.task}_per_class.csv", r.per_class_frame().to_csv(index=False))
    doc = {**tool_stamp(), **(extra or {}), "reports": [r.to_json() for r in reports]}
    return write_json(out_dir / f"{prefix}eval_report.json", doc)
