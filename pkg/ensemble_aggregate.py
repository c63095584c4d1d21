"""
Probability averaging across ensemble members and across the images of a
capture event, plus the prediction-file format shared by eval and sweep.

Prediction file (JSONL), one line per (image or event, head):
    {"image_id": "evt000012_img0", "level": "image", "head": "species", "probs": [...]}
    {"event_id": "evt000012", "level": "event", "head": "species", "probs": [...]}
Heads: binary, species, count, attributes (positive-class probabilities),
one_stage.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from artifacts import atomic_write_text
from domain import BinaryPrediction, MultiTaskPrediction, OneStagePrediction, Prediction
from errors import DataError, DimensionError, ParseError

log = logging.getLogger(__name__)

HEAD_NAMES = ("binary", "species", "count", "attributes", "one_stage")
LEVELS = ("image", "event")
ID_KEYS = {"image": "image_id", "event": "event_id"}


# ============================================================================
# AVERAGING
# ============================================================================

def _mean_vectors(vectors: Sequence[np.ndarray], head: str) -> np.ndarray:
    sizes = {len(v) for v in vectors}
    if len(sizes) != 1:
        raise DimensionError(f"{head} head sizes differ across members: {sorted(sizes)}")
    return np.mean(np.stack(vectors), axis=0)


def average_predictions(preds: Sequence[Prediction]) -> Prediction:
    """Elementwise mean of every head over the members (uniform weights)."""
    if len(preds) == 0:
        raise DataError("cannot average an empty sequence of predictions")
    kinds = {type(p) for p in preds}
    if len(kinds) != 1:
        raise DimensionError(f"cannot average mixed prediction types: {sorted(k.__name__ for k in kinds)}")

    first = preds[0]
    if isinstance(first, BinaryPrediction):
        v = _mean_vectors([p.as_vector() for p in preds], "binary")
        return BinaryPrediction(p_animal=float(v[0]), p_empty=float(v[1]))
    if isinstance(first, OneStagePrediction):
        return OneStagePrediction(_mean_vectors([p.class_probs for p in preds], "one_stage"))
    return MultiTaskPrediction(
        species_probs=_mean_vectors([p.species_probs for p in preds], "species"),
        count_probs=_mean_vectors([p.count_probs for p in preds], "count"),
        attribute_probs=_mean_vectors([p.attribute_probs for p in preds], "attributes"),
    )


@dataclass(frozen=True)
class EnsemblePrediction:
    members: tuple[Prediction, ...]
    averaged: Prediction

    @classmethod
    def of(cls, members: Sequence[Prediction]) -> EnsemblePrediction:
        return cls(tuple(members), average_predictions(members))


def average_heads(members: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Batch form of average_predictions: mean of per-member (n, size) head arrays."""
    if len(members) == 0:
        raise DataError("cannot average an empty ensemble")
    names = set(members[0])
    for m in members[1:]:
        if set(m) != names:
            raise DimensionError(f"ensemble members expose different heads: {sorted(names)} vs {sorted(m)}")
    out = {}
    for name in members[0]:
        shapes = {m[name].shape for m in members}
        if len(shapes) != 1:
            raise DimensionError(f"{name} head shapes differ across members: {sorted(shapes)}")
        out[name] = np.mean(np.stack([m[name] for m in members]), axis=0)
    return out


def top_n(probs: Sequence[float] | np.ndarray, n: int) -> list[int]:
    """The n most probable classes, highest first; ties go to the lower id."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if not 1 <= n <= p.size:
        raise DataError(f"n must be in [1, {p.size}], got {n}")
    return [int(i) for i in np.argsort(-p, kind="stable")[:n]]


# ============================================================================
# CAPTURE EVENTS
# ============================================================================

def aggregate_event(event_preds: Sequence[Prediction]) -> Prediction:
    """Event-level prediction: the mean over the event's image predictions."""
    return average_predictions(event_preds)


def aggregate_heads_by_event(
    heads: dict[str, np.ndarray], event_ids: Sequence[str]
) -> tuple[list[str], dict[str, np.ndarray]]:
    """Average image-level head rows per event; events keep first-seen order."""
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, event_id in enumerate(event_ids):
        groups.setdefault(event_id, []).append(i)
    for name, arr in heads.items():
        if len(arr) != len(event_ids):
            raise DimensionError(f"{name}: {len(arr)} rows for {len(event_ids)} images")
    rows = list(groups.values())
    out = {name: np.stack([arr[idx].mean(axis=0) for idx in rows]) if rows else arr[:0]
           for name, arr in heads.items()}
    return list(groups), out


# ============================================================================
# PREDICTION FILES
# ============================================================================

def prediction_lines(ids: Sequence[str], heads: dict[str, np.ndarray], level: str = "image") -> list[str]:
    if level not in LEVELS:
        raise DataError(f"level must be one of {LEVELS}, got {level!r}")
    for name, arr in heads.items():
        if name not in HEAD_NAMES:
            raise DataError(f"unknown head {name!r}")
        if len(arr) != len(ids):
            raise DimensionError(f"{name}: {len(arr)} rows for {len(ids)} ids")
    lines = []
    for i, item_id in enumerate(ids):
        for name in HEAD_NAMES:
            if name in heads:
                lines.append(json.dumps({ID_KEYS[level]: item_id, "level": level, "head": name,
                                         "probs": heads[name][i].tolist()}, sort_keys=True))
    return lines


def write_predictions(path: str | Path, ids: Sequence[str], heads: dict[str, np.ndarray],
                      level: str = "image") -> Path:
    return atomic_write_text(path, "".join(line + "\n" for line in prediction_lines(ids, heads, level)))


@dataclass(frozen=True, eq=False)
class PredictionSet:
    level: str
    ids: list[str]
    heads: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.ids)


def read_predictions(path: str | Path) -> PredictionSet:
    """
    Load a prediction file; every id must carry the same set of heads. Image
    records are keyed by image_id, event records by event_id.
    """
    rows: OrderedDict[str, dict[str, list[float]]] = OrderedDict()
    levels = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                level = obj.get("level", "image")
                if level not in LEVELS:
                    raise ParseError(line_no, f"unknown level {level!r}")
                item_id, head, probs = obj[ID_KEYS[level]], obj["head"], obj["probs"]
            except (ValueError, KeyError, TypeError, AttributeError) as e:
                raise ParseError(line_no, f"bad prediction record ({e})") from None
            if head not in HEAD_NAMES:
                raise ParseError(line_no, f"unknown head {head!r}")
            entry = rows.setdefault(item_id, {})
            if head in entry:
                raise ParseError(line_no, f"duplicate {head} record for {item_id}")
            entry[head] = probs
            levels.add(level)

    if len(levels) > 1:
        raise DataError(f"{path}: mixes prediction levels {sorted(levels)}")
    head_sets = {tuple(sorted(entry)) for entry in rows.values()}
    if len(head_sets) > 1:
        raise DataError(f"{path}: ids carry different head sets {sorted(head_sets)}")
    ids = list(rows)
    present = next(iter(head_sets), ())
    names = [h for h in HEAD_NAMES if h in present]
    try:
        heads = {h: np.array([rows[i][h] for i in ids], dtype=np.float64) for h in names}
    except ValueError:
        raise DataError(f"{path}: probability vectors of one head differ in length") from None
    log.debug(f"Loaded {len(ids):,} predictions with heads {names}")
    return PredictionSet(levels.pop() if levels else "image", ids, heads)
