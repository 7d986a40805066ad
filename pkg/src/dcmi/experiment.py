"""Experiment configs, validation, and the variant x seed (x lambda) run matrix."""
from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import Dataset, SyntheticSpec, downsample, generate_synthetic, load_jsonl, split
from .encoder import Vocab, build_vocab
from .io_utils import atomic_write_text
from .model import VARIANTS, export_representations
from .train import Aggregate, RunReport, TrainConfig, TrainingDiverged, aggregate_table, mean_std, seed_list, train

PRESETS = {"asc": (50.0, 6.0), "dsc": (30.0, 15.0), "rfd": (4.0, 3.0)}
TOP_LEVEL = {"data", "variants", "seeds", "preset", "train", "export_representations", "sweep", "output"}
DATA_KEYS = {"synthetic", "jsonl", "split", "split_seed", "downsample"}
SWEEP_KEYS = {"lam1", "lam2", "variant", "seeds", "max_runs"}


class ConfigError(ValueError):
    """Invalid experiment config. ``field`` is a dotted path into the config."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def log_grid(n: int, high: float = 5000.0, low: float = 0.01) -> list[float]:
    """``0`` followed by ``n - 1`` log-spaced values from ``low`` to ``high``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < low <= high:
        raise ValueError("need 0 < low <= high")
    return [0.0] + [float(x) for x in np.geomspace(low, high, n - 1)]


@dataclass
class SweepConfig:
    lam1: list[float]
    lam2: list[float]
    variant: str = "dcmi"
    seeds: int = 1
    max_runs: int = 200

    @property
    def cells(self) -> list[tuple[float, float]]:
        return list(itertools.product(self.lam1, self.lam2))

    @property
    def n_runs(self) -> int:
        return len(self.cells) * self.seeds


@dataclass
class ExperimentConfig:
    synthetic: SyntheticSpec | None
    jsonl: Path | None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    downsample_train: float = 1.0
    downsample_val: float = 1.0
    variants: list[str] = field(default_factory=lambda: ["dcmi"])
    seeds: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    export_representations: bool = False
    sweep: SweepConfig | None = None
    output: Path | None = None


# ----------------------------------------------------------------------------
# parsing and validation (shared by run, sweep and validate)


def _mapping(raw: Any, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(where, "expected a mapping")
    return raw


def _reject_unknown(raw: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(prefix + unknown[0], "unknown key")


def _number(raw: Any, where: str, minimum: float | None = None, integer: bool = False) -> float:
    if isinstance(raw, str) and not integer:
        # YAML 1.1 reads "3e-5" (no dot) as a string
        try:
            raw = float(raw)
        except ValueError:
            pass
    ok = isinstance(raw, int) if integer else isinstance(raw, (int, float))
    if isinstance(raw, bool) or not ok:
        raise ConfigError(where, "expected an integer" if integer else "expected a number")
    if minimum is not None and raw < minimum:
        raise ConfigError(where, f"must be >= {minimum}, got {raw}")
    return raw


OPTIONAL_INTS = {"emb_dim", "hidden_dim"}


def _check_type(value: Any, default: Any, name: str, where: str) -> Any:
    if name in OPTIONAL_INTS:
        return None if value is None else _number(value, where, integer=True)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, "expected true or false")
        return value
    if isinstance(default, int):
        return _number(value, where, integer=True)
    if isinstance(default, float):
        return float(_number(value, where))
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(where, "expected a string")
    return value


def _grid(raw: Any, where: str) -> list[float]:
    if isinstance(raw, dict):
        _reject_unknown(raw, {"log", "high", "low"}, where)
        if "log" not in raw:
            raise ConfigError(f"{where}.log", "missing point count")
        n = int(_number(raw["log"], f"{where}.log", 1, integer=True))
        high = _number(raw.get("high", 5000.0), f"{where}.high", 0)
        low = _number(raw.get("low", 0.01), f"{where}.low", 0)
        if not 0 < low <= high:
            raise ConfigError(where, "need 0 < low <= high")
        return log_grid(n, high, low)
    if not isinstance(raw, list) or not raw:
        raise ConfigError(where, "expected a non-empty list or {log: n}")
    return [float(_number(v, f"{where}[{i}]", 0)) for i, v in enumerate(raw)]


def parse_config(raw: Any, base_dir: Path = Path("."), preset: str | None = None) -> ExperimentConfig:
    """Validate a loaded config document and build an :class:`ExperimentConfig`.

    ``preset`` (from the command line) overrides the config's own ``preset``;
    explicit ``train.lam1`` / ``train.lam2`` values override either.
    """
    raw = _mapping(raw, "config")
    _reject_unknown(raw, TOP_LEVEL, "")

    data = _mapping(raw.get("data"), "data")
    _reject_unknown(data, DATA_KEYS, "data")
    has_syn, has_jsonl = "synthetic" in data, "jsonl" in data
    if has_syn == has_jsonl:
        raise ConfigError("data", "give exactly one of data.synthetic or data.jsonl")
    synthetic = jsonl = None
    if has_syn:
        try:
            synthetic = SyntheticSpec.from_dict(_mapping(data["synthetic"], "data.synthetic"))
            synthetic.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError("data.synthetic", str(exc)) from None
    else:
        if not isinstance(data["jsonl"], str):
            raise ConfigError("data.jsonl", "expected a file path")
        jsonl = (base_dir / data["jsonl"]).resolve()
        if not jsonl.is_file():
            raise ConfigError("data.jsonl", f"file not found: {jsonl}")

    fractions = data.get("split", [0.8, 0.1, 0.1])
    if not isinstance(fractions, list) or len(fractions) != 3:
        raise ConfigError("data.split", "expected three fractions [train, val, test]")
    fractions = tuple(float(_number(f, f"data.split[{i}]")) for i, f in enumerate(fractions))
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("data.split", "fractions must be positive and sum to 1")
    split_seed = int(_number(data.get("split_seed", 0), "data.split_seed", 0, integer=True))
    down = _mapping(data.get("downsample"), "data.downsample")
    _reject_unknown(down, {"train", "val"}, "data.downsample")
    down_train = _number(down.get("train", 1), "data.downsample.train", 1)
    down_val = _number(down.get("val", 1), "data.downsample.val", 1)

    variants = raw.get("variants", ["dcmi"])
    if isinstance(variants, str):
        variants = [variants]
    if not isinstance(variants, list) or not variants:
        raise ConfigError("variants", "expected a non-empty list")
    for i, v in enumerate(variants):
        if v not in VARIANTS:
            raise ConfigError(f"variants[{i}]", f"unknown variant {v!r}, expected one of {', '.join(VARIANTS)}")
    if len(set(variants)) != len(variants):
        raise ConfigError("variants", "duplicate entries")
    seeds = int(_number(raw.get("seeds", 5), "seeds", 1, integer=True))

    train_raw = dict(_mapping(raw.get("train"), "train"))
    preset = preset or raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}, expected one of {', '.join(PRESETS)}")
        lam1, lam2 = PRESETS[preset]
        train_raw.setdefault("lam1", lam1)
        train_raw.setdefault("lam2", lam2)
    if "variant" in train_raw:
        raise ConfigError("train.variant", "set variants at the top level")
    defaults = TrainConfig()
    for key, value in train_raw.items():
        if not hasattr(defaults, key):
            raise ConfigError(f"train.{key}", "unknown key")
        train_raw[key] = _check_type(value, getattr(defaults, key), key, f"train.{key}")
    train_cfg = TrainConfig.from_dict(train_raw)
    try:
        train_cfg.validate()
    except ValueError as exc:
        name, _, msg = str(exc).partition(": ")
        raise ConfigError(f"train.{name}", msg) from None

    sweep = None
    if "sweep" in raw:
        sw = _mapping(raw["sweep"], "sweep")
        _reject_unknown(sw, SWEEP_KEYS, "sweep")
        for key in ("lam1", "lam2"):
            if key not in sw:
                raise ConfigError(f"sweep.{key}", "missing grid")
        variant = sw.get("variant", "dcmi")
        if variant not in VARIANTS:
            raise ConfigError("sweep.variant", f"unknown variant {variant!r}")
        sweep = SweepConfig(
            lam1=_grid(sw["lam1"], "sweep.lam1"),
            lam2=_grid(sw["lam2"], "sweep.lam2"),
            variant=variant,
            seeds=int(_number(sw.get("seeds", 1), "sweep.seeds", 1, integer=True)),
            max_runs=int(_number(sw.get("max_runs", 200), "sweep.max_runs", 1, integer=True)),
        )
        if sweep.n_runs > sweep.max_runs:
            raise ConfigError(
                "sweep.max_runs",
                f"grid of {len(sweep.lam1)} x {len(sweep.lam2)} = {len(sweep.cells)} cells x "
                f"{sweep.seeds} seed(s) = {sweep.n_runs} runs exceeds the budget of {sweep.max_runs}",
            )

    export = raw.get("export_representations", False)
    if not isinstance(export, bool):
        raise ConfigError("export_representations", "expected true or false")
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output", "expected a directory path")

    return ExperimentConfig(
        synthetic=synthetic,
        jsonl=jsonl,
        split=fractions,
        split_seed=split_seed,
        downsample_train=down_train,
        downsample_val=down_val,
        variants=list(variants),
        seeds=seeds,
        train=train_cfg,
        export_representations=export,
        sweep=sweep,
        output=None if output is None else (base_dir / output),
    )


def load_config(path: str | Path, preset: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark else ""
        raise ConfigError("config", f"invalid YAML{where}") from None
    return parse_config(raw, path.parent, preset)


def check_output_dir(out: Path) -> None:
    """Create ``out`` if needed and confirm it accepts files."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError("output", f"directory not writable: {out} ({exc.strerror})") from None


# ----------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    vocab: Vocab


def prepare_data(cfg: ExperimentConfig) -> Splits:
    dataset = generate_synthetic(cfg.synthetic) if cfg.synthetic is not None else load_jsonl(cfg.jsonl)
    tr, va, te = split(dataset, cfg.split, seed=cfg.split_seed)
    tr = downsample(tr, cfg.downsample_train, cfg.split_seed, "train")
    va = downsample(va, cfg.downsample_val, cfg.split_seed, "val")
    return Splits(tr, va, te, build_vocab(tr.texts, cfg.train.vocab_size))


# ----------------------------------------------------------------------------
# running


@dataclass(frozen=True)
class Job:
    config: TrainConfig
    tag: str = ""


@dataclass
class JobResult:
    job: Job
    report: RunReport | None
    error: str | None
    repr_csv: str | None = None


def _run_job(job: Job, splits: Splits, export: bool, tmp_dir: str | None) -> JobResult:
    try:
        result = train(job.config, splits.train, splits.val, splits.test, vocab=splits.vocab)
    except (TrainingDiverged, ValueError) as exc:
        return JobResult(job, None, str(exc))
    text = None
    if export:
        path = Path(tmp_dir) / f"repr_{job.config.variant}_{job.config.seed}{job.tag}.csv"
        export_representations(result.model, splits.test, path, splits.vocab, job.config.max_len)
        text = path.read_text(encoding="utf-8")
        path.unlink()
    return JobResult(job, result.report, None, text)


def run_jobs(jobs: list[Job], splits: Splits, workers: int = 1, export: bool = False, tmp_dir: Path | None = None) -> list[JobResult]:
    """Run independent jobs, in order, optionally across processes."""
    tmp = str(tmp_dir) if tmp_dir else None
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job, splits, export, tmp) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_job, job, splits, export, tmp) for job in jobs]
        return [f.result() for f in futures]


def losses_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "sup", "dom", "con", "val_macro_auc"])
    for epoch, (row, val) in enumerate(zip(report.epoch_losses, report.val_macro)):
        cells = [row[k] for k in ("sup", "dom", "con")] + [val]
        writer.writerow([epoch] + ["" if c is None else f"{c:.9g}" for c in cells])
    return buf.getvalue()


@dataclass
class RunOutcome:
    aggregates: list[Aggregate]
    written: list[Path]

    @property
    def partial(self) -> bool:
        return any(a.partial for a in self.aggregates)


def run_experiment(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunOutcome:
    """Train every variant for every seed; write reports, loss traces and the aggregate table."""
    splits = prepare_data(cfg)
    seeds = seed_list(cfg.train.seed, cfg.seeds)
    jobs = [Job(TrainConfig(**{**asdict(cfg.train), "variant": v, "seed": s})) for v in cfg.variants for s in seeds]
    results = run_jobs(jobs, splits, workers, cfg.export_representations, out)

    written: list[Path] = []
    aggregates = {v: Aggregate(v, seeds, []) for v in cfg.variants}
    for res in results:
        variant, seed = res.job.config.variant, res.job.config.seed
        agg = aggregates[variant]
        if res.report is None:
            agg.partial = True
            agg.errors.append(f"seed {seed}: {res.error}")
            continue
        agg.reports.append(res.report)
        written.append(atomic_write_text(out / f"report_{variant}_{seed}.json", res.report.to_json()))
        written.append(atomic_write_text(out / f"losses_{variant}_{seed}.csv", losses_csv(res.report)))
        if res.repr_csv is not None:
            written.append(atomic_write_text(out / f"repr_{variant}_{seed}.csv", res.repr_csv))
    aggs = list(aggregates.values())
    table = aggregate_table(aggs, splits.test.domain_names, title="Test AUC (mean ± std over seeds, x100)")
    written.append(atomic_write_text(out / "aggregate.md", table))
    written.append(atomic_write_text(out / "vocab.txt", "".join(t + "\n" for t in splits.vocab.tokens)))
    return RunOutcome(aggs, written)


@dataclass
class SweepCell:
    lam1: float
    lam2: float
    val_macro: float | None
    test_macro: float | None
    test_micro: float | None
    errors: list[str]


def _best_val(report: RunReport) -> float | None:
    vals = [v for v in report.val_macro if v is not None]
    return max(vals) if vals else None


def sweep_table(cells: list[SweepCell], best: int | None, variant: str) -> str:
    lines = [
        f"### lambda sweep ({variant}); best cell by validation macro AUC in bold",
        "",
        "| lam1 | lam2 | val macro | test macro | test micro |",
        "|---|---|---|---|---|",
    ]

    def fmt(x):
        return "n/a" if x is None else f"{100 * x:.1f}"

    for i, c in enumerate(cells):
        row = [f"{c.lam1:g}", f"{c.lam2:g}", fmt(c.val_macro), fmt(c.test_macro), fmt(c.test_micro)]
        if i == best:
            row = [f"**{x}**" for x in row]
        lines.append("| " + " | ".join(row) + " |")
    if best is not None:
        c = cells[best]
        lines += ["", f"Best: lam1={c.lam1:g}, lam2={c.lam2:g}"]
    return "\n".join(lines) + "\n"


def run_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> tuple[list[SweepCell], int | None]:
    """Cartesian lam1 x lam2 grid at ``sweep.seeds`` seeds per cell."""
    sw = cfg.sweep
    splits = prepare_data(cfg)
    seeds = seed_list(cfg.train.seed, sw.seeds)
    jobs = [
        Job(TrainConfig(**{**asdict(cfg.train), "variant": sw.variant, "seed": s, "lam1": l1, "lam2": l2}), f"_{i}")
        for i, (l1, l2) in enumerate(sw.cells)
        for s in seeds
    ]
    results = run_jobs(jobs, splits, workers)
    cells = []
    for i, (l1, l2) in enumerate(sw.cells):
        mine = [r for r in results if r.job.tag == f"_{i}"]
        reports = [r.report for r in mine if r.report is not None]
        cells.append(
            SweepCell(
                l1,
                l2,
                mean_std([v for v in map(_best_val, reports) if v is not None])[0],
                mean_std([r.macro_auc for r in reports if r.macro_auc is not None])[0],
                mean_std([r.micro_auc for r in reports if r.micro_auc is not None])[0],
                [r.error for r in mine if r.error],
            )
        )
    scored = [i for i, c in enumerate(cells) if c.val_macro is not None]
    # first cell wins ties so the choice is stable
    best = max(scored, key=lambda i: (cells[i].val_macro, -i)) if scored else None
    atomic_write_text(out / "aggregate.md", sweep_table(cells, best, sw.variant))
    payload = {
        "variant": sw.variant,
        "seeds": seeds,
        "best": None if best is None else {"lam1": cells[best].lam1, "lam2": cells[best].lam2},
        "cells": [asdict(c) for c in cells],
    }
    atomic_write_text(out / "sweep.json", json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return cells, best


def describe(cfg: ExperimentConfig) -> str:
    source = "synthetic" if cfg.synthetic is not None else str(cfg.jsonl)
    parts = [f"data={source}", f"variants={','.join(cfg.variants)}", f"seeds={cfg.seeds}",
             f"lam1={cfg.train.lam1:g}", f"lam2={cfg.train.lam2:g}"]
    if cfg.sweep is not None:
        parts.append(f"sweep={len(cfg.sweep.cells)} cells x {cfg.sweep.seeds} seed(s)")
    return " ".join(parts)
