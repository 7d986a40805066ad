"""Command line entry point: ``dcmi run|sweep|validate <config>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (
    PRESETS,
    ConfigError,
    check_output_dir,
    describe,
    load_config,
    run_experiment,
    run_sweep,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcmi", description="Multi-domain imbalanced text classification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "train every variant for every seed and write reports"),
        ("sweep", "grid search over (lam1, lam2)"),
        ("validate", "check a config without running anything"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", type=Path)
        p.add_argument("--preset", choices=sorted(PRESETS), help="named (lam1, lam2) defaults")
        if name != "validate":
            p.add_argument("--out", type=Path, help="output directory (overrides the config's output)")
            p.add_argument("--workers", type=int, default=1, help="parallel training processes")
            p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _output_dir(args, cfg) -> Path:
    out = args.out or cfg.output
    if out is None:
        raise ConfigError("output", "no output directory (set output in the config or pass --out)")
    check_output_dir(out)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, preset=args.preset)
        if args.command == "sweep" and cfg.sweep is None:
            raise ConfigError("sweep", "missing sweep section")
        if args.command == "validate":
            print(f"ok: {describe(cfg)}")
            return EXIT_OK
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        out = _output_dir(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))

    try:
        if args.command == "run":
            outcome = run_experiment(cfg, out, workers=args.workers)
            if outcome.partial:
                errors = [e for a in outcome.aggregates for e in a.errors]
                return _fail(EXIT_RUNTIME, f"{len(errors)} run(s) aborted; first: {errors[0]}")
            print(f"wrote {len(outcome.written)} files to {out}")
        else:
            cells, best = run_sweep(cfg, out, workers=args.workers)
            if best is None:
                return _fail(EXIT_RUNTIME, "no sweep cell produced a validation score")
            c = cells[best]
            print(f"best cell: lam1={c.lam1:g} lam2={c.lam2:g} (validation macro AUC {c.val_macro:.4f})")
    except (OSError, RuntimeError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
