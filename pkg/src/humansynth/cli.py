"""Command line entry point: generate, validate, fit-report and sample."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .pipeline import ConfigError, RunConfig, fit_report, load_resources, run_generate, sample_spec, validate_scene

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="humansynth", description="Seeded synthetic multi-human dataset generator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--sequences", type=_positive)
        sp.add_argument("--workers", type=_positive)

    run_flags(sub.add_parser("generate", help="generate sequences"))
    run_flags(sub.add_parser("sample", help="print sampled sequence specs without generating"))
    v = sub.add_parser("validate", help="check scene files")
    v.add_argument("scenes", nargs="+", type=Path)
    f = sub.add_parser("fit-report", help="summarize annotation-model fit residuals")
    f.add_argument("sequence_dirs", nargs="+", type=Path)
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "sequences", "workers") if getattr(args, k) is not None}
    if args.out is not None:
        overrides["out"] = str(args.out)
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _generate(args) -> int:
    cfg = _run_config(args)
    summary = run_generate(cfg)
    failed = [s["sequence_id"] for s in summary if s["status"] != "ok"]
    print(f"{len(summary) - len(failed)}/{len(summary)} sequences written to {cfg.out}")
    if failed:
        print(f"failed sequences: {failed}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _sample(args) -> int:
    cfg = _run_config(args)
    res = load_resources(cfg)
    for k in range(cfg.sequences):
        print(json.dumps({"sequence_id": k, **sample_spec(cfg, res, k).to_dict()}))
    return EXIT_OK


def _validate(args) -> int:
    bad = False
    for path in args.scenes:
        violations = validate_scene(path)
        print(json.dumps({"scene": str(path), "violations": violations}))
        bad |= bool(violations)
    return EXIT_CONFIG if bad else EXIT_OK


def _fit_report(args) -> int:
    for d in args.sequence_dirs:
        try:
            report = fit_report(d)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps({"sequence": str(d), **report}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"generate": _generate, "sample": _sample, "validate": _validate, "fit-report": _fit_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
