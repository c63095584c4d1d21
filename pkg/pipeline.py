"""
Two-stage detect-then-describe composition and its one-stage comparator.

Stage 1 (binary gate) decides empty vs animal for every image; stage 2
(multitask) describes the images the gate lets through. Each stage is the
average of its ensemble members, every member applying its own feature
pipeline before its network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from domain import LabelSet
from ensemble_aggregate import average_heads
from errors import DataError, LayoutMismatchError
from model import Checkpoint, HeadMode, predict_heads

log = logging.getLogger(__name__)

NO_CLASS = -1


def member_heads(ckpt: Checkpoint, X: np.ndarray) -> dict[str, np.ndarray]:
    """Head probabilities of one member's best checkpoint."""
    features = X if ckpt.pipeline is None else ckpt.pipeline.transform(X)
    return predict_heads(ckpt.state.best_state(), features)


def ensemble_heads(members: Sequence[Checkpoint], X: np.ndarray) -> dict[str, np.ndarray]:
    if not members:
        raise DataError("an ensemble needs at least one member")
    modes = {m.state.layout.mode for m in members}
    if len(modes) != 1:
        raise LayoutMismatchError(f"ensemble mixes head layouts {sorted(m.value for m in modes)}")
    return average_heads([member_heads(m, X) for m in members])


@dataclass(frozen=True, eq=False)
class PipelineDecisions:
    """Per-image outcome; species / count are NO_CLASS where the image is called empty."""
    empty: np.ndarray
    species: np.ndarray
    count_bin: np.ndarray | None = None
    attributes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.empty)


def _require(members: Sequence[Checkpoint], mode: HeadMode, stage: str) -> None:
    for m in members:
        if m.state.layout.mode is not mode:
            raise LayoutMismatchError(f"{stage} member has a {m.state.layout.mode.value} layout, "
                                      f"expected {mode.value}")


def two_stage_predict(stage1: Sequence[Checkpoint], stage2: Sequence[Checkpoint],
                      X: np.ndarray) -> tuple[PipelineDecisions, dict[str, np.ndarray]]:
    """Gate every image, then describe the ones judged non-empty."""
    _require(stage1, HeadMode.BINARY, "stage-1")
    _require(stage2, HeadMode.MULTITASK, "stage-2")
    gate = ensemble_heads(stage1, X)
    # argmax ties (0.5 / 0.5) go to "animal" (index 0).
    empty = np.argmax(gate["binary"], axis=1) == 1
    describe = ensemble_heads(stage2, X)

    species = np.where(empty, NO_CLASS, np.argmax(describe["species"], axis=1))
    count_bin = np.where(empty, NO_CLASS, np.argmax(describe["count"], axis=1))
    attributes = (describe["attributes"] > 0.5) & ~empty[:, None]
    heads = {"binary": gate["binary"], **describe}
    return PipelineDecisions(empty, species, count_bin, attributes), heads


def one_stage_decisions(probs: np.ndarray) -> PipelineDecisions:
    """Decisions from a (k+1)-way head whose last class is empty."""
    cls = np.argmax(np.asarray(probs), axis=1)
    empty = cls == probs.shape[1] - 1
    return PipelineDecisions(empty, np.where(empty, NO_CLASS, cls))


@dataclass(frozen=True)
class PipelineScores:
    total_accuracy: float
    empty_vs_animal_accuracy: float
    # Over truly non-empty images; an image wrongly gated as empty counts as a miss.
    identification_accuracy: float | None
    n_images: int

    def to_json(self) -> dict:
        return {
            "total_accuracy": self.total_accuracy,
            "empty_vs_animal_accuracy": self.empty_vs_animal_accuracy,
            "identification_accuracy": self.identification_accuracy,
            "n_images": self.n_images,
        }


def evaluate_pipeline(decisions: PipelineDecisions, labels: Sequence[LabelSet]) -> PipelineScores:
    """An image is right when it is truly empty and called empty, or has an animal and gets its species."""
    if len(decisions) != len(labels):
        raise DataError(f"{len(decisions)} decisions for {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("no images to score")
    true_empty = np.array([lab.empty for lab in labels], dtype=bool)
    true_species = np.array([NO_CLASS if lab.empty else lab.species.id for lab in labels], dtype=np.int64)

    gate_ok = decisions.empty == true_empty
    species_ok = ~true_empty & ~decisions.empty & (decisions.species == true_species)
    correct = (true_empty & decisions.empty) | species_ok
    animals = ~true_empty
    return PipelineScores(
        total_accuracy=float(correct.mean()),
        empty_vs_animal_accuracy=float(gate_ok.mean()),
        identification_accuracy=float(species_ok[animals].mean()) if animals.any() else None,
        n_images=len(labels),
    )
