#!/usr/bin/env python3
"""Estimate how much signal the pseudo-test cells hold before training anything.

For a generator configuration, builds pseudo test sets per (group, year) cell
and scores three hand-rolled statistics with AUROC:

  level  - mean of the drift features at the now visit (plus a now-year term)
  slope  - least-squares trend of the drift features over the visible window
  recent - most recent one-step difference ending at now

`level` approximates what a model sees under the now-only scenario; adding
`slope`/`recent` approximates the (-2, annual) scenario. The gap between the
two bounds the history benefit a trained model can realize, which makes this
a cheap way to tune generator knobs before paying for a full run.
"""
import argparse
import sys

import numpy as np

from longprog.cohort import Diagnosis, filter_cohort, generate_synthetic_cohort
from longprog.evaluation import auroc, build_pseudo_test_set
from longprog.experiments import ExperimentConfig


def window_stats(subject, now_year, offsets, drift):
    allowed = {now_year + o for o in offsets}
    def feat_mean(v):
        vals = [v.features[n].value for n in drift if v.features[n].observed]
        return float(np.mean(vals)) if vals else None
    vals = {v.year: feat_mean(v) for v in subject.visits if v.year in allowed}
    vals = {y: m for y, m in vals.items() if m is not None}
    level = vals.get(now_year, 0.0)
    slope = 0.0
    if len(vals) >= 2:
        ys = np.array(sorted(vals), float)
        slope = float(np.polyfit(ys, [vals[y] for y in sorted(vals)], 1)[0])
    recent = 0.0
    yrs = sorted(vals)
    for a, b in zip(yrs, yrs[1:]):
        if b == now_year:
            recent = (vals[b] - vals[a]) / (b - a)
    return level, slope, recent


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True, help="experiment config with a generator section")
    ap.add_argument("--reps", type=int, default=20, help="pseudo test sets per cell")
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.from_file(args.config)
    if cfg.generator is None:
        ap.error("config must define a generator")
    subjects = filter_cohort(generate_synthetic_cohort(cfg.generator, cfg.schema)).subjects
    by_id = {s.subject_id: s for s in subjects}
    drift = cfg.generator.drift_features
    years = cfg.follow_up_years
    rng = np.random.default_rng(123)

    print(f"{len(subjects)} retained subjects, drift features {list(drift)}")
    for group in (Diagnosis.CN, Diagnosis.MCI):
        gaps = []
        for year in years:
            base_s, full_s, lab = [], [], []
            for _ in range(args.reps):
                ps = build_pseudo_test_set(subjects, group, year, rng)
                for sid, now_year, label in ps.entries:
                    lev, slo, rec = window_stats(by_id[sid], now_year, (-2, -1, 0), drift)
                    lab.append(1 if label > group else 0)
                    base_s.append(lev + 0.8 * now_year)
                    full_s.append(lev + 0.8 * now_year + 3.0 * slo + 2.0 * rec)
            lab = np.array(lab)
            a0 = auroc(np.array(base_s), lab)
            a1 = auroc(np.array(full_s), lab)
            gaps.append(a1 - a0)
            print(f"{group.name:>3} year {year}: pos rate {lab.mean():.2f}  "
                  f"level {a0:.3f}  +history {a1:.3f}  gap {a1 - a0:+.3f}")
        print(f"{group.name:>3} mean achievable history gap: {np.mean(gaps):+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
