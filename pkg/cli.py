#!/usr/bin/env python3
"""
Camera-trap labeling pipeline: synthesize data, train stage models, evaluate,
sweep confidence thresholds and write a report.

Usage:
    python cli.py synth  --config config.env --out runs/demo
    python cli.py train  --config config.env --out runs/demo --stage stage1
    python cli.py train  --config config.env --out runs/demo --stage stage2
    python cli.py eval   --config config.env --out runs/demo
    python cli.py sweep  --config config.env --out runs/demo
    python cli.py report --config config.env --out runs/demo

Exit codes: 0 success, 1 usage/config error, 2 data or I/O error,
3 numeric/training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from artifacts import atomic_write_text, tool_stamp, write_json
from domain import LabelSet
from ensemble_aggregate import aggregate_heads_by_event, read_predictions, write_predictions
from errors import ConfigError, DataError, LayoutMismatchError, PipelineError, UnattainableTargetError
from manifest import Dataset, balance_empty, drop_empty, filter_single_species, load_manifest, split_by_event
from metrics import evaluate_heads, write_reports
from model import Checkpoint, HeadMode, fit, init_state, load_checkpoint, save_checkpoint
from pipeline import ensemble_heads, evaluate_pipeline, one_stage_decisions, two_stage_predict
from prep import FeaturePipeline
from run_config import STAGES, RunConfig, load_run_config, member_seed, write_resolved
from synthgen import write as write_synthetic
from threshold import (
    TASK_METRICS,
    AutomationSummary,
    Task,
    compose_two_stage,
    labor_savings,
    match_curve,
    stage1_automation,
    sweep,
    write_curve_csv,
    write_curve_svg,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 2

# Published full-scale results, shown beside desk-scale numbers in reports.
REFERENCE_RESULTS = (
    ("Empty vs animal, top-1 (VGG)", "96.8%"),
    ("Identification, ensemble top-1 / top-5", "94.9% / 99.1%"),
    ("Counting, ensemble top-1 / within one bin", "63.1% / 84.7%"),
    ("Attributes, accuracy / precision / recall", "76.2% / 86.1% / 81.1%"),
    ("Identification per capture event, ensemble top-1", "95.5%"),
    ("One-stage total accuracy (ResNet-50)", "91.3%"),
    ("Automated share at 96.6% species accuracy", "99.3%"),
    ("Automated share including counting at 90.0%", "86.1%"),
    ("Human labor saved", "8.4 years (over 17,000 hours)"),
)
REFERENCE_LABEL = "published reference, not reproduced"


# ============================================================================
# SHARED HELPERS
# ============================================================================

def log_banner(title: str) -> None:
    log.info("=" * 70)
    log.info(title)
    log.info("=" * 70)


def log_histogram(counts: dict[str, int], total: int) -> None:
    width = max((len(name) for name in counts), default=0)
    for name, count in counts.items():
        pct = count / total * 100 if total else 0.0
        bar = "█" * int(pct / 2)
        log.info(f"  {name:<{width}s} {count:6,d} ({pct:5.1f}%) {bar}")


def pct(x: float | None) -> str:
    return "n/a" if x is None else f"{x * 100:.1f}%"


def load_dataset(cfg: RunConfig) -> Dataset:
    dataset = load_manifest(cfg.manifest)
    dataset, _ = filter_single_species(dataset)
    return dataset


def stage_datasets(stage: str, train: Dataset, test: Dataset, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training / test sets for one stage (stage 2 sees non-empty images only)."""
    if stage == "stage2":
        return drop_empty(train), drop_empty(test)
    stats = train.stats
    if cfg.train_balance_empty and stats.empty_images and stats.n_images > stats.empty_images:
        match = "largest_class" if stage == "one_stage" else "non_empty"
        train = balance_empty(train, cfg.seed, match=match)
    return train, test


def check_compatible(ckpt: Checkpoint, dataset: Dataset, path: str | Path) -> None:
    layout = ckpt.state.layout
    if layout.mode is not HeadMode.BINARY and layout.n_species != len(dataset.taxonomy):
        raise LayoutMismatchError(f"{path}: {layout.n_species} species heads, "
                                  f"manifest taxonomy has {len(dataset.taxonomy)}")
    expected = ckpt.pipeline.output_dim if ckpt.pipeline else dataset.feature_dim
    raw_dim = int(np.prod(ckpt.pipeline.shape)) if ckpt.pipeline else ckpt.state.input_dim
    if ckpt.state.input_dim != expected or raw_dim != dataset.feature_dim:
        raise LayoutMismatchError(f"{path}: checkpoint expects {raw_dim} features, "
                                  f"manifest has {dataset.feature_dim}")


# ============================================================================
# SYNTH
# ============================================================================

def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    synth = cfg.synth_config()
    dataset = write_synthetic(synth, cfg.manifest)
    write_resolved(cfg, cfg.out)

    stats = dataset.stats
    log_banner("SYNTHETIC DATASET")
    log.info(f"  Manifest: {cfg.manifest}")
    log.info(f"  Events: {stats.n_events:,}  Images: {stats.n_images:,}")
    log.info(f"  Empty events: {stats.empty_events:,} ({pct(stats.empty_event_fraction)})")
    log.info("")
    log.info("EVENTS PER SPECIES:")
    names = {s: dataset.taxonomy.by_id(s).name for s in range(len(dataset.taxonomy))}
    non_empty = stats.n_events - stats.empty_events
    log_histogram({names[c]: stats.events_per_class.get(c, 0) for c in names}, non_empty)
    return EXIT_OK


# ============================================================================
# TRAIN
# ============================================================================

def _train_member(cfg: RunConfig, stage: str, member: int, train: Dataset, test: Dataset,
                  pipeline: FeaturePipeline, out_dir: Path) -> Checkpoint:
    seed = member_seed(cfg.seed, member)
    tcfg = cfg.train_config(seed)
    layout = cfg.head_layout(len(train.taxonomy), stage)
    state = init_state(layout, pipeline.output_dim, tcfg.hidden_sizes, seed)
    fit(state, train, test, tcfg, pipeline=pipeline)

    best = state.best
    metadata = {
        "stage": stage,
        "member": member,
        "seed": seed,
        "best_epoch": best.epoch,
        "best_accuracy": best.accuracy,
        "taxonomy": list(train.taxonomy.names),
        "n_train_images": train.stats.n_images,
        "n_test_images": test.stats.n_images,
    }
    ckpt = Checkpoint(state, tcfg, metadata, pipeline)
    save_checkpoint(ckpt, out_dir / f"member_{member:02d}.ckpt.json")
    epochs = pd.DataFrame([asdict(r) for r in state.history])
    atomic_write_text(out_dir / f"member_{member:02d}_epochs.csv", epochs.to_csv(index=False))
    return ckpt


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    stage = cfg.train_stage
    start = time.perf_counter()
    dataset = load_dataset(cfg)
    train, test = split_by_event(dataset, cfg.split_spec())
    train, test = stage_datasets(stage, train, test, cfg)
    if not train.events or not test.events:
        raise DataError(f"{stage}: no training or test images after filtering")

    shape = dataset.feature_shape if cfg.train_augment else None
    if cfg.train_augment and shape is None:
        raise ConfigError("TRAIN_AUGMENT", "manifest header declares no feature_shape")
    pipeline = FeaturePipeline.fit(train.feature_matrix(), shape, cfg.augment_spec())

    out_dir = cfg.out / stage
    write_resolved(cfg, out_dir)
    log.info(f"Training {cfg.ensemble_members} {stage} member(s) on {train.stats.n_images:,} images "
             f"({cfg.train_epochs} epochs x {cfg.train_epoch_size} batches, workers={cfg.train_workers})")

    results: dict[int, Checkpoint] = {}
    with ThreadPoolExecutor(max_workers=cfg.train_workers) as executor:
        futures = {executor.submit(_train_member, cfg, stage, m, train, test, pipeline, out_dir): m
                   for m in range(cfg.ensemble_members)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()

    members = [results[m] for m in sorted(results)]
    summary = {
        **tool_stamp(),
        "stage": stage,
        "members": [c.metadata for c in members],
    }
    write_json(out_dir / "train_summary.json", summary)

    log_banner(f"TRAINING SUMMARY ({stage})")
    for c in members:
        m = c.metadata
        log.info(f"  member {m['member']:2d}  seed {m['seed']:<20d} best epoch {m['best_epoch']:3d}  "
                 f"test top-1 {pct(m['best_accuracy'])}")
    log.info(f"  Total time: {time.perf_counter() - start:.1f}s")
    return EXIT_OK


# ============================================================================
# EVAL
# ============================================================================

def discover_checkpoints(out: Path) -> list[Path]:
    return [p for stage in STAGES for p in sorted((out / stage).glob("member_*.ckpt.json"))]


def _event_view(test: Dataset) -> tuple[list[str], list[LabelSet]]:
    return [e.event_id for e in test.events], [e.label for e in test.events]


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.checkpoints] or discover_checkpoints(cfg.out)
    if not paths:
        raise DataError(f"no checkpoints given and none found under {cfg.out}")
    dataset = load_dataset(cfg)
    _, test = split_by_event(dataset, cfg.split_spec())

    groups: dict[HeadMode, list[Checkpoint]] = {}
    for path in paths:
        ckpt = load_checkpoint(path)
        check_compatible(ckpt, dataset, path)
        groups.setdefault(ckpt.state.layout.mode, []).append(ckpt)

    X = test.feature_matrix()
    images = test.images()
    labels = [img.label for img in images]
    image_ids = [img.image_id for img in images]
    multi_image = any(len(e.images) > 1 for e in test.events)
    eval_dir = cfg.out / "eval"
    write_resolved(cfg, eval_dir)

    log_banner("EVALUATION")
    heads_by_mode = {}
    for mode, members in groups.items():
        out_dir = eval_dir / mode.value
        heads = ensemble_heads(members, X)
        heads_by_mode[mode] = heads
        extra = {"mode": mode.value, "members": [m.metadata.get("seed") for m in members]}
        reports = evaluate_heads(heads, labels, dataset.taxonomy, cfg.eval_pooled)
        write_reports(reports, out_dir, "image_", {**extra, "level": "image"})
        write_predictions(out_dir / "predictions.jsonl", image_ids, heads, level="image")

        log.info(f"{mode.value.upper()} ({len(members)} member{'s' if len(members) > 1 else ''}):")
        for r in reports:
            log.info(f"  image  {r.task:16s} top-1 {pct(r.top1)}"
                     + (f"  top-5 {pct(r.top5)}" if r.top5 is not None else "")
                     + (f"  ±1 bin {pct(r.within_one_bin)}" if r.within_one_bin is not None else ""))

        if multi_image:
            event_ids, event_heads = aggregate_heads_by_event(heads, [img.event_id for img in images])
            _, event_labels = _event_view(test)
            event_reports = evaluate_heads(event_heads, event_labels, dataset.taxonomy, cfg.eval_pooled)
            write_reports(event_reports, out_dir, "event_", {**extra, "level": "event"})
            write_predictions(out_dir / "event_predictions.jsonl", event_ids, event_heads, level="event")
            for r in event_reports:
                log.info(f"  event  {r.task:16s} top-1 {pct(r.top1)}")

        if len(members) > 1:
            for i, member in enumerate(members):
                member_reports = evaluate_heads(ensemble_heads([member], X), labels,
                                                dataset.taxonomy, cfg.eval_pooled)
                write_reports(member_reports, out_dir, f"member_{i:02d}_image_", {**extra, "level": "image"})

    scores: dict[str, Any] = {}
    if HeadMode.BINARY in groups and HeadMode.MULTITASK in groups:
        decisions, _ = two_stage_predict(groups[HeadMode.BINARY], groups[HeadMode.MULTITASK], X)
        scores["two_stage"] = evaluate_pipeline(decisions, labels).to_json()
    if HeadMode.ONE_STAGE in groups:
        decisions = one_stage_decisions(heads_by_mode[HeadMode.ONE_STAGE]["one_stage"])
        scores["one_stage"] = evaluate_pipeline(decisions, labels).to_json()
    if scores:
        write_json(eval_dir / "pipeline_scores.json", {**tool_stamp(), **scores})
        log.info("PIPELINE:")
        for name, s in scores.items():
            log.info(f"  {name:10s} total {pct(s['total_accuracy'])}  empty/animal "
                     f"{pct(s['empty_vs_animal_accuracy'])}  identification {pct(s['identification_accuracy'])}")
    return EXIT_OK


# ============================================================================
# SWEEP
# ============================================================================

def _labels_for(ps_level: str, ids: Sequence[str], dataset: Dataset) -> list[LabelSet]:
    if ps_level == "event":
        lookup = {e.event_id: e.label for e in dataset.events}
    else:
        lookup = {img.image_id: img.label for img in dataset.images()}
    missing = [i for i in ids if i not in lookup]
    if missing:
        raise DataError(f"{len(missing)} prediction ids not in the manifest (first: {missing[0]})")
    return [lookup[i] for i in ids]


def _automation_entry(summary: AutomationSummary | None, error: UnattainableTargetError | None,
                      target: float) -> dict[str, Any]:
    if summary is not None:
        return {**summary.to_json(), "automatable": True}
    return {"automatable": False, "target_accuracy": target,
            "max_achievable": None if error is None else error.max_achievable}


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.predictions] or sorted((cfg.out / "eval").glob("*/predictions.jsonl"))
    grid = cfg.thresholds()
    sweep_dir = cfg.out / "sweep"
    write_resolved(cfg, sweep_dir)
    dataset = load_dataset(cfg) if paths else None

    targets = {
        Task.EMPTY_VS_ANIMAL: cfg.threshold_stage1_human_accuracy,
        Task.IDENTIFICATION: cfg.threshold_species_target,
        Task.COUNTING: cfg.threshold_count_target,
    }
    found: dict[Task, AutomationSummary | None] = {}
    failures: dict[Task, UnattainableTargetError] = {}
    curves_written = []

    for path in paths:
        ps = read_predictions(path)
        labels = _labels_for(ps.level, ps.ids, dataset)
        empty = np.array([lab.empty for lab in labels], dtype=bool)
        animals = np.flatnonzero(~empty)
        jobs = []
        if "binary" in ps.heads:
            jobs.append((Task.EMPTY_VS_ANIMAL, ps.heads["binary"], empty.astype(np.int64)))
        if "species" in ps.heads and animals.size:
            jobs.append((Task.IDENTIFICATION, ps.heads["species"][animals],
                         np.array([labels[i].species.id for i in animals])))
        if "count" in ps.heads and animals.size:
            jobs.append((Task.COUNTING, ps.heads["count"][animals],
                         np.array([labels[i].count.index for i in animals])))

        for task, probs, y in jobs:
            metric, secondary = TASK_METRICS[task]
            curve = sweep(probs, y, grid, metric, secondary, task=task.value)
            stem = f"{path.parent.name}_{ps.level}_{task.value}"
            write_curve_csv(curve, sweep_dir / f"{stem}_curve.csv")
            write_curve_svg(curve, sweep_dir / f"{stem}_curve.svg", targets[task])
            curves_written.append(stem)
            if ps.level != "image" or task in found:
                continue
            try:
                if task is Task.EMPTY_VS_ANIMAL:
                    found[task] = stage1_automation(probs, y, targets[task], grid)
                else:
                    found[task] = match_curve(curve, targets[task], task)
            except UnattainableTargetError as e:
                log.warning(f"{task.value}: {e}")
                found[task] = None
                failures[task] = e

    overrides = {
        Task.EMPTY_VS_ANIMAL: cfg.threshold_stage1_auto_fraction,
        Task.IDENTIFICATION: cfg.threshold_species_auto_fraction,
        Task.COUNTING: cfg.threshold_count_auto_fraction,
    }
    fractions: dict[Task, float | None] = {}
    for task in Task:
        if overrides[task] is not None:
            fractions[task] = overrides[task]
        elif found.get(task) is not None:
            fractions[task] = found[task].automated_fraction_of_stage
        else:
            fractions[task] = None
    if fractions[Task.EMPTY_VS_ANIMAL] is None and Task.EMPTY_VS_ANIMAL not in failures:
        log.warning("No stage-1 predictions; assuming the empty/animal stage is fully automated")
        fractions[Task.EMPTY_VS_ANIMAL] = 1.0

    labor = cfg.labor_model()
    totals = {}
    for task in (Task.IDENTIFICATION, Task.COUNTING):
        s1, s2 = fractions[Task.EMPTY_VS_ANIMAL], fractions[task]
        if s1 is None or s2 is None:
            totals[task.value] = None
            continue
        total = compose_two_stage(cfg.threshold_empty_fraction, s1, s2)
        saved = labor_savings(labor, total)
        totals[task.value] = {"stage1_fraction": s1, "stage2_fraction": s2, "total_automated_fraction": total,
                              "hours_saved": saved.hours_saved, "person_years_saved": saved.person_years_saved}
        if found.get(task) is not None:
            found[task] = replace(found[task], total_automated_fraction=total)

    summary = {
        **tool_stamp(),
        "grid_size": len(grid),
        "empty_fraction": cfg.threshold_empty_fraction,
        "curves": curves_written,
        "automation": {t.value: _automation_entry(found.get(t), failures.get(t), targets[t])
                       for t in Task if t in found},
        "overrides": {t.value: v for t, v in overrides.items() if v is not None},
        "totals": totals,
    }
    write_json(sweep_dir / "sweep_summary.json", summary)

    log_banner("AUTOMATION SUMMARY")
    for t in Task:
        entry = found.get(t)
        if entry is not None:
            log.info(f"  {t.value:16s} threshold {entry.matched_threshold:.2f}  automated "
                     f"{pct(entry.automated_fraction_of_stage)} of stage at {pct(entry.achieved_accuracy)}")
        elif t in failures:
            log.info(f"  {t.value:16s} not automatable at {pct(targets[t])} "
                     f"(max {pct(failures[t].max_achievable)})")
    for name, total in totals.items():
        if total is None:
            log.info(f"  {name:16s} total: n/a")
            continue
        log.info(f"  {name:16s} total automated {pct(total['total_automated_fraction'])}  saves "
                 f"{total['hours_saved']:,.0f} h ({total['person_years_saved']:.2f} person-years)")
    return EXIT_OK


# ============================================================================
# REPORT
# ============================================================================

def _read_json(path: Path) -> dict[str, Any] | None:
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x * 100:.2f}%"


def build_report(out: Path) -> str:
    lines = ["# Camera-trap labeling pipeline report", ""]
    lines += ["## Desk-scale results (synthetic data)", ""]
    found_any = False
    for level in ("image", "event"):
        for path in sorted((out / "eval").glob(f"*/{level}_eval_report.json")):
            doc = _read_json(path)
            found_any = True
            lines += [f"### {doc['mode']} ({level} level, {len(doc['members'])} member(s))", "",
                      "| task | n | top-1 | top-5 | within one bin | multi-label acc / prec / rec |",
                      "|---|---|---|---|---|---|"]
            for r in doc["reports"]:
                ml = r.get("multilabel")
                ml_text = "" if ml is None else f"{_fmt(ml['accuracy'])} / {_fmt(ml['precision'])} / {_fmt(ml['recall'])}"
                lines.append(f"| {r['task']} | {r['n_examples']} | {_fmt(r['top1'])} | {_fmt(r['top5'])} "
                             f"| {_fmt(r['within_one_bin'])} | {ml_text} |")
            lines.append("")
    if not found_any:
        lines += ["No evaluation reports found.", ""]

    scores = _read_json(out / "eval" / "pipeline_scores.json")
    if scores:
        lines += ["## One-stage vs two-stage", "",
                  "| pipeline | total | empty vs animal | identification |", "|---|---|---|---|"]
        for name in ("two_stage", "one_stage"):
            if name in scores:
                s = scores[name]
                lines.append(f"| {name} | {_fmt(s['total_accuracy'])} | {_fmt(s['empty_vs_animal_accuracy'])} "
                             f"| {_fmt(s['identification_accuracy'])} |")
        if "two_stage" in scores and "one_stage" in scores:
            agrees = scores["one_stage"]["total_accuracy"] <= scores["two_stage"]["total_accuracy"]
            lines += ["", f"Diagnostic only: the one-stage model is "
                          f"{'not better than' if agrees else 'better than'} the two-stage pipeline here, "
                          f"which {'agrees' if agrees else 'disagrees'} with the published direction "
                          f"(one-stage slightly worse)."]
        lines.append("")

    sweep_doc = _read_json(out / "sweep" / "sweep_summary.json")
    if sweep_doc:
        lines += ["## Automation", "", "| task | threshold | automated share of stage | accuracy |", "|---|---|---|---|"]
        for task, entry in sweep_doc["automation"].items():
            if entry["automatable"]:
                lines.append(f"| {task} | {entry['matched_threshold']:.2f} | {_fmt(entry['automated_fraction_of_stage'])} "
                             f"| {_fmt(entry['achieved_accuracy'])} |")
            else:
                lines.append(f"| {task} | not automatable at {_fmt(entry['target_accuracy'])} | | |")
        lines.append("")
        for name, total in sweep_doc["totals"].items():
            if total:
                lines.append(f"- {name}: {_fmt(total['total_automated_fraction'])} of all images automated, "
                             f"{total['hours_saved']:,.0f} hours ({total['person_years_saved']:.2f} person-years) saved")
        lines.append("")

    lines += [f"## Full-scale numbers ({REFERENCE_LABEL})", "", "| result | value |", "|---|---|"]
    lines += [f"| {name} | {value} |" for name, value in REFERENCE_RESULTS]
    lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    write_resolved(cfg, cfg.out)
    path = atomic_write_text(cfg.out / "report.md", build_report(cfg.out))
    log.info(f"Report written to {path}")
    return EXIT_OK


# ============================================================================
# MAIN
# ============================================================================

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError("usage", message)


def _add_common(p: argparse.ArgumentParser, defaults: bool) -> None:
    # Subcommand copies only set what was given after the command name.
    default = None if defaults else argparse.SUPPRESS
    p.add_argument("--config", default=default, help="Run config file (KEY=value lines)")
    p.add_argument("--seed", type=int, default=default, help="Override SEED")
    p.add_argument("--out", default=default, help="Override OUT_DIR")
    p.add_argument("--set", action="append", dest="set" if defaults else "set_after",
                   default=[] if defaults else argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="Override any config key (repeatable)")
    p.add_argument("--verbose", action="store_true", default=False if defaults else argparse.SUPPRESS,
                   help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, defaults=False)

    parser = _Parser(description="Camera-trap labeling pipeline")
    _add_common(parser, defaults=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="Write a synthetic manifest")
    train = sub.add_parser("train", parents=[common], help="Train one stage's ensemble")
    train.add_argument("--stage", choices=STAGES, help="Override TRAIN_STAGE")
    ev = sub.add_parser("eval", parents=[common], help="Evaluate checkpoints on the test split")
    ev.add_argument("checkpoints", nargs="*", help="Checkpoint files (default: all under OUT_DIR)")
    sw = sub.add_parser("sweep", parents=[common], help="Confidence-threshold sweep and automation")
    sw.add_argument("predictions", nargs="*", help="Prediction files (default: OUT_DIR/eval/*/predictions.jsonl)")
    sub.add_parser("report", parents=[common], help="Write report.md from earlier outputs")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in [*args.set, *getattr(args, "set_after", [])]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        overrides[key.strip().upper()] = value
    if args.seed is not None:
        overrides["SEED"] = str(args.seed)
    if args.out is not None:
        overrides["OUT_DIR"] = args.out
    if getattr(args, "stage", None):
        overrides["TRAIN_STAGE"] = args.stage
    return load_run_config(args.config, overrides=overrides)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except PipelineError as e:
        log.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        log.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
