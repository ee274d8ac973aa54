#!/usr/bin/env python3
"""Run the desk-scale history-signal experiment and print the report.

Equivalent to `longprog run --config configs/desk.json`, with a convenience
flag for rerunning into a fresh directory. Expect ~5-10 minutes.
"""
import argparse
import sys
from pathlib import Path

from longprog.experiments import ExperimentConfig, run_experiment


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.json"))
    ap.add_argument("--out", default=None, help="override the configured output directory")
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.from_file(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    manifest = run_experiment(cfg)
    print(f"completed {len(manifest.completed_splits)}/{cfg.n_splits} splits -> {cfg.out_dir}")
    print((Path(cfg.out_dir) / "reports" / "summary.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
