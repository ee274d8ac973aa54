"""Command-line entry point.

Subcommands mirror the pipeline stages: `generate` a synthetic cohort,
`filter` it through the retention rules, `train` one split's ensemble,
`gridsearch` one split's architecture, `evaluate` existing checkpoints,
`run` the whole experiment, and `report` to (re)aggregate CSVs.

Every subcommand exits 0 only when it ran to completion; any failure prints
a diagnostic on stderr and exits 1. `LONGPROG_WORKERS` sets the training
worker count (default 1; results are identical at any setting).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .cohort import filter_cohort, generate_synthetic_cohort, read_cohort_jsonl, write_cohort_jsonl
from .experiments import (
    ExperimentConfig,
    emit_report,
    evaluate_run,
    prepare_cohort,
    prepare_split,
    run_experiment,
    train_split,
)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "no_expansion", False):
        cfg.no_expansion = True
    if getattr(args, "no_bias_reduction", False):
        cfg.no_bias_reduction = True
    return cfg


def _cmd_generate(args) -> None:
    cfg = _load_config(args)
    if cfg.generator is None:
        raise ValueError("config has no generator section")
    gen = cfg.generator
    if args.seed is not None:
        gen = dataclasses.replace(gen, seed=args.seed)
    subjects = generate_synthetic_cohort(gen, cfg.schema)
    out = Path(args.out or Path(cfg.out_dir) / "cohort.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort_jsonl(subjects, out)
    print(f"wrote {len(subjects)} subjects to {out}")


def _cmd_filter(args) -> None:
    subjects = read_cohort_jsonl(args.input)
    cohort = filter_cohort(subjects)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort_jsonl(cohort.subjects, out)
    total_excluded = sum(cohort.exclusions.values())
    print(f"retained {len(cohort.subjects)} subjects, excluded {total_excluded}")
    for rule, n in cohort.exclusions.items():
        print(f"  {rule}: {n}")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("rule,n_excluded\n")
            for rule, n in cohort.exclusions.items():
                fh.write(f"{rule},{n}\n")
        print(f"exclusion report: {args.report}")


def _cmd_train(args) -> None:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = prepare_cohort(cfg, out)
    split_info = prepare_split(cfg, out, cohort, args.split)
    snapshots, prefixes = train_split(cfg, out, cohort.by_id(), split_info, args.split)
    print(f"split {args.split}: {len(snapshots)} checkpoints under {out / 'splits'}")
    for prefix in prefixes:
        print(f"  {prefix}")


def _cmd_gridsearch(args) -> None:
    cfg = _load_config(args)
    cfg.grid = dataclasses.replace(cfg.grid, enabled=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = prepare_cohort(cfg, out)
    split_info = prepare_split(cfg, out, cohort, args.split)
    if not split_info["grid_table"]:
        print(f"split {args.split}: grid search already resolved in split.json")
    else:
        for entry in split_info["grid_table"]:
            c = entry["config"]
            crit = entry["criterion"]
            crit_s = "failed" if crit is None else f"{crit:.6f}"
            print(
                f"  hidden={c['hidden_dim']} heads={c['n_heads']} layers={c['n_layers']} "
                f"classifier={c['classifier']} -> {crit_s}"
            )
    print(f"selected: {json.dumps(split_info['model'], sort_keys=True)}")


def _cmd_evaluate(args) -> None:
    cfg = _load_config(args)
    run_dir = Path(args.run or cfg.out_dir)
    reports = evaluate_run(cfg, run_dir, no_bias=cfg.no_bias_reduction)
    for path in reports:
        print(path)


def _cmd_run(args) -> None:
    cfg = _load_config(args)
    manifest = run_experiment(cfg)
    print(f"completed {len(manifest.completed_splits)}/{manifest.n_splits} splits")
    for path in manifest.reports:
        print(path)


def _cmd_report(args) -> None:
    run_dir = Path(args.run)
    if getattr(args, "no_bias_reduction", False):
        paths = emit_report(run_dir, cells_name="metrics_cells_nobias.csv", reports_name="reports_nobias")
    else:
        paths = emit_report(run_dir)
    for path in paths:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longprog",
        description="Horizon-conditioned prognosis models over longitudinal visit histories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True, out=True, ablations=False):
        p.add_argument("--config", required=True, help="experiment config (.json or .toml)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if out:
            p.add_argument("--out", default=None, help="override the output directory")
        if ablations:
            p.add_argument("--no-expansion", action="store_true",
                           help="train on baseline-anchored samples only")
            p.add_argument("--no-bias-reduction", action="store_true",
                           help="evaluate on all eligible samples instead of pseudo test sets")

    p = sub.add_parser("generate", help="synthesize a cohort and write it as JSONL")
    add_common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("filter", help="apply the retention rules to a cohort file")
    p.add_argument("--in", dest="input", required=True, help="input cohort JSONL")
    p.add_argument("--out", required=True, help="filtered cohort JSONL")
    p.add_argument("--report", default=None, help="write per-rule exclusion counts as CSV")
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("train", help="train the fold x seed ensemble for one split")
    add_common(p, ablations=True)
    p.add_argument("--split", type=int, default=0, help="split index (default 0)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gridsearch", help="run the architecture grid search for one split")
    add_common(p)
    p.add_argument("--split", type=int, default=0, help="split index (default 0)")
    p.set_defaults(func=_cmd_gridsearch)

    p = sub.add_parser("evaluate", help="re-evaluate an existing run's checkpoints")
    add_common(p, ablations=True)
    p.add_argument("--run", default=None, help="run directory (default: config out_dir)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run the full experiment end to end")
    add_common(p, ablations=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="aggregate split metrics into report CSVs")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--no-bias-reduction", action="store_true",
                   help="aggregate the no-bias-reduction cell tables instead")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as err:  # noqa: BLE001 - single exit point for the CLI
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
