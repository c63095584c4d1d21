"""
Run configuration: one flat KEY=value file (read with python-dotenv) that
feeds every command.

Precedence, lowest first: field defaults, the --config file, CAMTRAP_*
environment variables, command-line flags (--seed, --out, --set KEY=VALUE).
Unknown keys are rejected wherever they come from.

Example config.env:
    SEED=7
    SYNTH_N_EVENTS=2000
    TRAIN_STAGE=stage2
    TRAIN_SCHEDULE=reference
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from dotenv import dotenv_values

from artifacts import TOOL_NAME, TOOL_VERSION, atomic_write_text
from errors import ConfigError
from imbalance import ImbalanceMethod
from manifest import SplitSpec
from model import HeadLayout, HeadMode, ScheduleRow, TrainConfig, constant_schedule, reference_schedule
from prep import AugmentSpec
from synthgen import SynthConfig
from threshold import DEFAULT_GRID, LaborModel

log = logging.getLogger(__name__)

ENV_PREFIX = "CAMTRAP_"
RESOLVED_FILE = "resolved_config.env"
STAGES = ("stage1", "stage2", "one_stage")
STAGE_MODES = {"stage1": HeadMode.BINARY, "stage2": HeadMode.MULTITASK, "one_stage": HeadMode.ONE_STAGE}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # Empty means <OUT_DIR>/manifest.jsonl.
    manifest_path: str = ""

    synth_n_classes: int = 8
    synth_feature_dim: int = 16
    synth_imbalance_exponent: float = 1.0
    synth_empty_fraction: float = 0.75
    synth_images_per_event: str = "0,0,1"
    synth_noise_rate: float = 0.05
    synth_n_events: int = 2000
    synth_class_separation: float = 6.0
    synth_class_frequencies: str = ""
    synth_feature_shape: str = ""

    split_train_fraction: float = 0.8
    split_respect_hints: bool = False

    train_stage: str = "stage2"
    train_epochs: int = 20
    train_epoch_size: int = 30
    train_batch_size: int = 128
    train_momentum: float = 0.9
    # "" = constant TRAIN_LEARNING_RATE / TRAIN_WEIGHT_DECAY; "reference" =
    # the published 55-epoch schedule rescaled; or "1-18:0.01:0.0005;19-20:0.005:0".
    train_schedule: str = ""
    train_learning_rate: float = 0.05
    train_weight_decay: float = 0.0
    train_hidden_sizes: str = "64,64"
    train_grad_clamp: float | None = None
    train_imbalance: str = "none"
    train_weight_scale: str = "mean_one"
    train_weighted_heads: str = "primary"
    train_emphasis_p1: float = 0.20
    train_emphasis_p5: float = 0.35
    train_balance_empty: bool = True
    train_augment: bool = False
    train_crop: str = ""
    train_workers: int = 1
    train_progress: bool = True

    ensemble_members: int = 1
    eval_pooled: str = "examples"

    threshold_grid: str = ""
    threshold_species_target: float = 0.966
    threshold_count_target: float = 0.900
    threshold_stage1_human_accuracy: float = 0.966
    threshold_empty_fraction: float = 0.75
    threshold_stage1_auto_fraction: float | None = None
    threshold_species_auto_fraction: float | None = None
    threshold_count_auto_fraction: float | None = None

    labor_baseline_hours: float = 14.6 * 52 * 40
    labor_baseline_images: int = 5_500_000
    labor_corpus_images: int = 3_200_000
    labor_hours_per_week: float = 40.0

    def __post_init__(self):
        if self.train_stage not in STAGES:
            raise ConfigError("TRAIN_STAGE", f"must be one of {STAGES}, got {self.train_stage!r}")
        try:
            ImbalanceMethod(self.train_imbalance)
        except ValueError:
            raise ConfigError("TRAIN_IMBALANCE", f"must be one of {[m.value for m in ImbalanceMethod]}") from None
        if self.ensemble_members < 1:
            raise ConfigError("ENSEMBLE_MEMBERS", "must be >= 1")
        if self.train_workers < 1:
            raise ConfigError("TRAIN_WORKERS", "must be >= 1")
        if self.eval_pooled not in ("examples", "attributes"):
            raise ConfigError("EVAL_POOLED", "must be 'examples' or 'attributes'")

    # ------------------------------------------------------------------
    # Paths
    # ------------------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def manifest(self) -> Path:
        return Path(self.manifest_path) if self.manifest_path else self.out / "manifest.jsonl"

    # ------------------------------------------------------------------
    # Typed sections
    # ------------------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        freqs = _floats("SYNTH_CLASS_FREQUENCIES", self.synth_class_frequencies)
        shape = _ints("SYNTH_FEATURE_SHAPE", self.synth_feature_shape)
        return SynthConfig(
            n_classes=self.synth_n_classes,
            feature_dim=self.synth_feature_dim,
            imbalance_exponent=self.synth_imbalance_exponent,
            empty_fraction=self.synth_empty_fraction,
            images_per_event=_floats("SYNTH_IMAGES_PER_EVENT", self.synth_images_per_event),
            noise_rate=self.synth_noise_rate,
            n_events=self.synth_n_events,
            seed=self.seed,
            class_separation=self.synth_class_separation,
            class_frequencies=freqs or None,
            feature_shape=shape or None,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_train_fraction, self.seed, self.split_respect_hints)

    def head_layout(self, n_species: int, stage: str | None = None) -> HeadLayout:
        return HeadLayout(STAGE_MODES[stage or self.train_stage], n_species=n_species)

    def schedule(self) -> tuple[ScheduleRow, ...]:
        return parse_schedule(self.train_schedule, self.train_epochs,
                              self.train_learning_rate, self.train_weight_decay)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.train_batch_size,
            momentum=self.train_momentum,
            epochs=self.train_epochs,
            epoch_size=self.train_epoch_size,
            schedule=self.schedule(),
            grad_clamp=self.train_grad_clamp,
            seed=self.seed if seed is None else seed,
            hidden_sizes=_ints("TRAIN_HIDDEN_SIZES", self.train_hidden_sizes),
            imbalance=ImbalanceMethod(self.train_imbalance),
            weight_scale=self.train_weight_scale,
            weighted_heads=tuple(h.strip() for h in self.train_weighted_heads.split(",") if h.strip()),
            emphasis_p1=self.train_emphasis_p1,
            emphasis_p5=self.train_emphasis_p5,
            progress=self.train_progress,
        )

    def augment_spec(self) -> AugmentSpec | None:
        if not self.train_augment:
            return None
        crop = _ints("TRAIN_CROP", self.train_crop)
        if len(crop) != 2:
            raise ConfigError("TRAIN_CROP", "augmentation needs TRAIN_CROP=h,w")
        return AugmentSpec(crop_size=crop, seed=self.seed)

    def thresholds(self) -> tuple[float, ...]:
        return _floats("THRESHOLD_GRID", self.threshold_grid) or DEFAULT_GRID

    def labor_model(self) -> LaborModel:
        return LaborModel(self.labor_baseline_hours, self.labor_baseline_images,
                          self.labor_corpus_images, self.labor_hours_per_week)

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_env_lines(self) -> list[str]:
        lines = []
        for key, value in sorted(asdict(self).items()):
            lines.append(f"{key.upper()}={_format(value)}")
        return lines


def member_seed(seed: int, member: int) -> int:
    """Distinct, reproducible seed for ensemble member `member`."""
    if member == 0:
        return seed
    return int(np.random.SeedSequence([seed, member]).generate_state(1)[0])


# ============================================================================
# PARSING
# ============================================================================

def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _floats(key: str, text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"expected comma-separated numbers, got {text!r}") from None


def _ints(key: str, text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {text!r}") from None


def _parse_value(key: str, annotation: str, raw: str) -> Any:
    raw = raw.strip()
    optional = annotation.endswith("| None")
    base = annotation.split("|")[0].strip()
    if optional and raw == "":
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {base}") from None


def parse_schedule(text: str, epochs: int, learning_rate: float = 0.05,
                   weight_decay: float = 0.0) -> tuple[ScheduleRow, ...]:
    """'' -> constant rate; 'reference' -> rescaled published schedule; else 'a-b:lr:wd;...'."""
    text = (text or "").strip()
    if not text:
        return constant_schedule(epochs, learning_rate, weight_decay)
    if text.lower() == "reference":
        return reference_schedule(epochs)
    rows = []
    for part in text.split(";"):
        if not part.strip():
            continue
        try:
            span, lr, wd = part.split(":")
            first, last = span.split("-")
            rows.append(ScheduleRow(int(first), int(last), float(lr), float(wd)))
        except ValueError:
            raise ConfigError("TRAIN_SCHEDULE", f"bad row {part!r}; expected first-last:lr:wd") from None
    return tuple(rows)


def _known_keys() -> dict[str, Any]:
    return {f.name.upper(): f for f in fields(RunConfig)}


def load_run_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, file, CAMTRAP_* environment and explicit overrides."""
    known = _known_keys()
    raw: dict[str, str] = {}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"{path} does not exist")
        for key, value in dotenv_values(path).items():
            if key not in known:
                raise ConfigError(key, f"unknown config key in {path}")
            raw[key] = "" if value is None else value

    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key not in known:
            raise ConfigError(name, "unknown config key in environment")
        raw[key] = value

    for key, value in (overrides or {}).items():
        key = key.upper()
        if key not in known:
            raise ConfigError(key, "unknown config key")
        raw[key] = str(value)

    kwargs = {known[k].name: _parse_value(k, known[k].type, v) for k, v in raw.items()}
    cfg = RunConfig(**kwargs)
    log.debug(f"Resolved {len(raw)} config keys ({', '.join(sorted(raw)) or 'defaults only'})")
    return cfg


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    header = f"# {TOOL_NAME} {TOOL_VERSION} resolved configuration\n"
    return atomic_write_text(Path(out_dir) / RESOLVED_FILE, header + "\n".join(cfg.to_env_lines()) + "\n")
