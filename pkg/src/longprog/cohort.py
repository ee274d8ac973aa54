"""Longitudinal cohort data model: visits, progression rules, synthetic generation.

The unit of time is integer years since each subject's baseline visit.
Progression is treated as irreversible (CN -> MCI -> AD); subjects whose
observed diagnosis sequence violates that are excluded by `filter_cohort`.
"""
from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class Diagnosis(IntEnum):
    """Diagnostic stage with the progression order CN < MCI < AD."""

    CN = 0
    MCI = 1
    AD = 2

    @classmethod
    def parse(cls, text: str) -> "Diagnosis":
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown diagnosis {text!r}") from None


class FeatureValue(NamedTuple):
    value: object  # float for numeric, category string for categorical, None if unobserved
    observed: bool


@dataclass
class VisitRecord:
    """One clinical visit. `features` maps feature name -> (value, observed)."""

    subject_id: str
    year: int
    diagnosis: Diagnosis | None
    features: dict[str, FeatureValue] = field(default_factory=dict)

    def feature(self, name: str) -> FeatureValue:
        return self.features.get(name, FeatureValue(None, False))


@dataclass
class SubjectHistory:
    """All visits of one subject, ordered by year, with a baseline at year 0."""

    subject_id: str
    baseline_diagnosis: Diagnosis | None
    visits: list[VisitRecord]

    def __post_init__(self) -> None:
        years = [v.year for v in self.visits]
        if years != sorted(years) or len(set(years)) != len(years):
            raise ValueError(f"{self.subject_id}: visit years must be strictly increasing")

    @property
    def visit_years(self) -> list[int]:
        return [v.year for v in self.visits]

    def visit_at(self, year: int) -> VisitRecord | None:
        for v in self.visits:
            if v.year == year:
                return v
        return None

    def visits_in(self, lo: int, hi: int) -> list[VisitRecord]:
        return [v for v in self.visits if lo <= v.year <= hi]


@dataclass
class Cohort:
    """Retained subjects plus per-exclusion-rule counts and ids."""

    subjects: list[SubjectHistory]
    exclusions: dict[str, int] = field(default_factory=dict)
    excluded_ids: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subjects)

    def by_id(self) -> dict[str, SubjectHistory]:
        return {s.subject_id: s for s in self.subjects}


def _has_reversion_after(dxs: list[tuple[int, Diagnosis]], stage: Diagnosis, back_to: Diagnosis) -> bool:
    seen_stage_year = None
    for year, dx in dxs:
        if dx == stage and seen_stage_year is None:
            seen_stage_year = year
        elif seen_stage_year is not None and dx == back_to and year > seen_stage_year:
            return True
    return False


# Rule order is fixed so per-rule exclusion counts are reproducible; the rules
# are independent predicates, so the retained set does not depend on the order.
EXCLUSION_RULE_ORDER = (
    "missing_baseline",
    "ad_baseline",
    "cn_to_ad",
    "cn_mci_reversion",
    "mci_cn_reversion",
    "no_followup",
)


def _exclusion_rule(subject: SubjectHistory) -> str | None:
    baseline = subject.visit_at(0)
    if baseline is None or baseline.diagnosis is None or subject.baseline_diagnosis is None:
        return "missing_baseline"
    dxs = [(v.year, v.diagnosis) for v in subject.visits if v.diagnosis is not None]
    base = subject.baseline_diagnosis
    if base == Diagnosis.AD:
        return "ad_baseline"
    if base == Diagnosis.CN and any(dx == Diagnosis.AD for _, dx in dxs):
        return "cn_to_ad"
    if base == Diagnosis.CN and _has_reversion_after(dxs, Diagnosis.MCI, Diagnosis.CN):
        return "cn_mci_reversion"
    if base == Diagnosis.MCI and any(dx == Diagnosis.CN for year, dx in dxs if year > 0):
        return "mci_cn_reversion"
    if not any(year >= 1 for year, _ in dxs):
        return "no_followup"
    return None


def filter_cohort(subjects: Iterable[SubjectHistory]) -> Cohort:
    """Apply the inclusion/exclusion rules and report per-rule counts.

    Removes: AD-at-baseline subjects, CN-baseline subjects ever diagnosed AD,
    CN-baseline subjects with an MCI-then-CN reversion, MCI-baseline subjects
    diagnosed CN after baseline, and subjects without a follow-up diagnosis.
    Idempotent: filtering a filtered cohort removes nothing.
    """
    retained: list[SubjectHistory] = []
    counts = {rule: 0 for rule in EXCLUSION_RULE_ORDER}
    ids: dict[str, list[str]] = {rule: [] for rule in EXCLUSION_RULE_ORDER}
    for subject in subjects:
        rule = _exclusion_rule(subject)
        if rule is None:
            retained.append(subject)
        else:
            counts[rule] += 1
            ids[rule].append(subject.subject_id)
    return Cohort(retained, counts, ids)


def carry_forward_labels(subject: SubjectHistory, max_year: int) -> dict[int, Diagnosis]:
    """Year -> diagnosis map with converted stages carried forward.

    Observed diagnoses label their own year. Once a stage above baseline is
    observed, every later year up to `max_year` keeps (at least) that stage,
    surviving dropout. Years with no visit for still-stable subjects are
    absent from the map.
    """
    labels: dict[int, Diagnosis] = {}
    for v in subject.visits:
        if v.diagnosis is not None and v.year <= max_year:
            labels[v.year] = v.diagnosis
    base = subject.baseline_diagnosis
    if base is None:
        return labels
    seen = base
    for v in subject.visits:
        if v.diagnosis is None or v.diagnosis <= seen:
            continue
        seen = v.diagnosis
        for year in range(v.year, max_year + 1):
            if year not in labels or labels[year] < v.diagnosis:
                labels[year] = v.diagnosis
    return labels


# ---------------------------------------------------------------------------
# Synthetic cohort generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic ADNI-like cohort generator.

    Trajectories follow a two-state absorbing chain per baseline group
    (CN -> MCI, MCI -> AD) with geometric dropout and per-visit skipping.
    With `history_signal` on, the features named in `drift_features` ramp up
    over the three years before conversion on top of a subject-level random
    offset, so the trend across visits carries information the single `now`
    visit does not.
    """

    n_subjects: int = 1000
    cn_fraction: float = 0.45
    ad_baseline_fraction: float = 0.0
    conversion_hazard: Mapping[str, float] = field(
        default_factory=lambda: {"CN": 0.06, "MCI": 0.14}
    )
    # first year the conversion hazard is active; > 1 delays conversions so
    # converters accrue pre-conversion visits (prodromal room)
    conversion_onset_year: int = 1
    dropout_hazard: float = 0.06
    visit_skip_prob: float = 0.15
    # optional per-stage override of visit_skip_prob, keyed "CN"/"MCI"/"AD";
    # unequal rates induce stage-dependent visit density (temporal bias).
    visit_skip_by_stage: Mapping[str, float] | None = None
    missingness: Mapping[str, float] = field(
        default_factory=lambda: {"COGN": 0.2, "MRI": 0.25, "CSF": 0.7, "STATIC": 0.0}
    )
    max_follow_up_years: int = 8
    diagnosis_missing_prob: float = 0.0
    # excludable-subject knobs, used to exercise filter_cohort
    reversion_probability: float = 0.0
    cn_second_hazard: float = 0.0
    # history-signal knob
    history_signal: bool = False
    drift_features: tuple[str, ...] = ()
    drift_magnitude: float = 1.0
    drift_intercept_std: float = 3.0
    drift_noise_std: float = 0.5
    # ramp shape over the 4 pre-conversion years: "linear" rises by one
    # magnitude per year; "accelerating" back-loads the rise into the final
    # year (0, 0.5, 1.5, 3 magnitudes), so recent visit spacing matters more
    drift_curve: str = "linear"
    baseline_age_mean: float = 73.0
    baseline_age_std: float = 6.5
    seed: int = 0

    def __post_init__(self) -> None:
        probs = {
            "cn_fraction": self.cn_fraction,
            "ad_baseline_fraction": self.ad_baseline_fraction,
            "dropout_hazard": self.dropout_hazard,
            "visit_skip_prob": self.visit_skip_prob,
            "diagnosis_missing_prob": self.diagnosis_missing_prob,
            "reversion_probability": self.reversion_probability,
            "cn_second_hazard": self.cn_second_hazard,
        }
        probs.update({f"conversion_hazard[{k}]": v for k, v in self.conversion_hazard.items()})
        probs.update({f"missingness[{k}]": v for k, v in self.missingness.items()})
        if self.visit_skip_by_stage:
            probs.update({f"visit_skip_by_stage[{k}]": v for k, v in self.visit_skip_by_stage.items()})
        for name, p in probs.items():
            if not 0.0 <= float(p) <= 1.0:
                raise ValueError(f"{name} = {p} is not a probability")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.max_follow_up_years < 1:
            raise ValueError("max_follow_up_years must be >= 1")
        if self.conversion_onset_year < 1:
            raise ValueError("conversion_onset_year must be >= 1")
        if self.drift_curve not in ("linear", "accelerating"):
            raise ValueError("drift_curve must be 'linear' or 'accelerating'")


def _first_success_year(rng: np.random.Generator, hazard: float, start: int, stop: int) -> int | None:
    for year in range(start, stop + 1):
        if rng.random() < hazard:
            return year
    return None


# drift weight (in magnitudes) at 0..4 years into the pre-conversion ramp
_ACCELERATING_RAMP = (0.0, 0.5, 1.5, 3.0, 4.0)


def _ramp_weight(year: int, conv_year: int, curve: str) -> float:
    step = max(0, min(year, conv_year) - (conv_year - 4))
    if curve == "accelerating":
        return _ACCELERATING_RAMP[step]
    return float(step)


def generate_synthetic_cohort(cfg: GeneratorConfig, schema) -> list[SubjectHistory]:
    """Simulate a cohort under `cfg`, emitting features per `schema`.

    Deterministic for a fixed config (seed included). Emitted subjects need
    not all pass `filter_cohort`; the reversion / AD-baseline / second-hazard
    knobs deliberately produce excludable histories.
    """
    from .features import KIND_CATEGORICAL, KIND_DIAGNOSIS, KIND_NUMERIC  # local import, no cycle at call time

    rng = np.random.default_rng(cfg.seed)
    drift_set = set(cfg.drift_features) if cfg.history_signal else set()
    for name in drift_set:
        spec = schema.by_name.get(name)
        if spec is None or spec.kind != KIND_NUMERIC:
            raise ValueError(f"drift feature {name!r} must be a numeric schema feature")

    subjects: list[SubjectHistory] = []
    for i in range(cfg.n_subjects):
        sid = f"S{i:05d}"
        u = rng.random()
        if u < cfg.ad_baseline_fraction:
            base = Diagnosis.AD
        elif u < cfg.ad_baseline_fraction + (1 - cfg.ad_baseline_fraction) * cfg.cn_fraction:
            base = Diagnosis.CN
        else:
            base = Diagnosis.MCI
        baseline_age = rng.normal(cfg.baseline_age_mean, cfg.baseline_age_std)

        hazard = cfg.conversion_hazard.get(base.name, 0.0) if base != Diagnosis.AD else 0.0
        conv_year = _first_success_year(
            rng, hazard, cfg.conversion_onset_year, cfg.max_follow_up_years
        )
        second_year = None
        if base == Diagnosis.CN and conv_year is not None and cfg.cn_second_hazard > 0:
            second_year = _first_success_year(
                rng, cfg.cn_second_hazard, conv_year + 1, cfg.max_follow_up_years
            )
        dropout_year = _first_success_year(rng, cfg.dropout_hazard, 1, cfg.max_follow_up_years)
        last_year = cfg.max_follow_up_years if dropout_year is None else dropout_year - 1

        def stage_at(year: int) -> Diagnosis:
            if base == Diagnosis.AD:
                return Diagnosis.AD
            if second_year is not None and year >= second_year:
                return Diagnosis.AD
            if conv_year is not None and year >= conv_year:
                return Diagnosis(base + 1)
            return base

        intercepts = {name: rng.normal(0.0, cfg.drift_intercept_std) for name in sorted(drift_set)}
        # subject-constant values: every categorical, plus STATIC numerics
        static_values: dict[str, object] = {}
        for spec in schema.features:
            if spec.kind == KIND_DIAGNOSIS or spec.name == schema.age_feature:
                continue
            if spec.kind == KIND_CATEGORICAL:
                static_values[spec.name] = spec.categories[rng.integers(len(spec.categories))]
            elif spec.modality == "STATIC":
                static_values[spec.name] = rng.normal(0.0, 1.0)

        visit_years = [0]
        for year in range(1, last_year + 1):
            skip = cfg.visit_skip_prob
            if cfg.visit_skip_by_stage:
                skip = cfg.visit_skip_by_stage.get(stage_at(year).name, skip)
            if rng.random() >= skip:
                visit_years.append(year)

        revert_year = None
        if cfg.reversion_probability > 0 and conv_year is not None:
            post = [y for y in visit_years if y > conv_year]
            if post and rng.random() < cfg.reversion_probability:
                revert_year = post[rng.integers(len(post))]

        visits = []
        for year in visit_years:
            dx: Diagnosis | None = stage_at(year)
            if year == revert_year:
                dx = base
            if year > 0 and cfg.diagnosis_missing_prob > 0 and rng.random() < cfg.diagnosis_missing_prob:
                dx = None
            feats: dict[str, FeatureValue] = {}
            for spec in schema.features:
                if spec.kind == KIND_DIAGNOSIS:
                    continue
                if spec.name == schema.age_feature:
                    feats[spec.name] = FeatureValue(baseline_age + year, True)
                    continue
                miss_rate = cfg.missingness.get(spec.modality, 0.0)
                if rng.random() < miss_rate:
                    feats[spec.name] = FeatureValue(None, False)
                    continue
                if spec.name in static_values:
                    feats[spec.name] = FeatureValue(static_values[spec.name], True)
                elif spec.name in drift_set:
                    ramp = 0.0
                    if conv_year is not None:
                        ramp = cfg.drift_magnitude * _ramp_weight(year, conv_year, cfg.drift_curve)
                    value = intercepts[spec.name] + ramp + rng.normal(0.0, cfg.drift_noise_std)
                    feats[spec.name] = FeatureValue(value, True)
                else:
                    feats[spec.name] = FeatureValue(rng.normal(0.0, 1.0), True)
            visits.append(VisitRecord(sid, year, dx, feats))
        subjects.append(SubjectHistory(sid, visits[0].diagnosis, visits))
    return subjects


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_subjects(
    subjects: Sequence[SubjectHistory],
    test_fraction: float,
    seed: int,
) -> tuple[list[str], list[str]]:
    """Subject-level train/test split stratified by baseline diagnosis.

    Within each baseline-diagnosis stratum the test count is
    round(n * test_fraction); strata with fewer than 2 subjects stay in train.
    """
    if not subjects:
        raise ValueError("cannot split an empty cohort")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    strata: dict[Diagnosis | None, list[str]] = {}
    for s in subjects:
        strata.setdefault(s.baseline_diagnosis, []).append(s.subject_id)
    train: list[str] = []
    test: list[str] = []
    for key in sorted(strata, key=lambda d: -1 if d is None else int(d)):
        ids = sorted(strata[key])
        if len(ids) < 2:
            warnings.warn(f"stratum {key} has {len(ids)} subject(s); kept whole in train")
            train.extend(ids)
            continue
        perm = rng.permutation(len(ids))
        n_test = int(round(len(ids) * test_fraction))
        shuffled = [ids[j] for j in perm]
        test.extend(shuffled[:n_test])
        train.extend(shuffled[n_test:])
    return sorted(train), sorted(test)


def kfold_partition(
    ids: Sequence[str],
    k: int,
    strata: Mapping[str, object],
    seed: int,
) -> list[list[str]]:
    """Stratified k-fold partition: disjoint folds whose union is `ids`,
    with per-stratum fold sizes differing by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of subjects ({len(ids)})")
    rng = np.random.default_rng(seed)
    groups: dict[object, list[str]] = {}
    for sid in ids:
        groups.setdefault(strata[sid], []).append(sid)
    folds: list[list[str]] = [[] for _ in range(k)]
    for key in sorted(groups, key=repr):
        members = sorted(groups[key])
        perm = rng.permutation(len(members))
        for slot, j in enumerate(perm):
            folds[slot % k].append(members[j])
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------------------
# Cohort I/O and summaries
# ---------------------------------------------------------------------------

def write_cohort_jsonl(subjects: Iterable[SubjectHistory], path) -> None:
    """One JSON record per visit: {subject_id, year, diagnosis, features}."""
    with open(path, "w") as fh:
        for s in subjects:
            for v in s.visits:
                rec = {
                    "subject_id": v.subject_id,
                    "year": v.year,
                    "diagnosis": None if v.diagnosis is None else v.diagnosis.name,
                    "features": {
                        name: {"value": fv.value, "observed": fv.observed}
                        for name, fv in v.features.items()
                    },
                }
                fh.write(json.dumps(rec) + "\n")


def read_cohort_jsonl(path) -> list[SubjectHistory]:
    by_subject: dict[str, list[VisitRecord]] = {}
    order: list[str] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            dx = None if rec["diagnosis"] is None else Diagnosis.parse(rec["diagnosis"])
            feats = {
                name: FeatureValue(entry["value"], bool(entry["observed"]))
                for name, entry in rec.get("features", {}).items()
            }
            sid = rec["subject_id"]
            if sid not in by_subject:
                by_subject[sid] = []
                order.append(sid)
            by_subject[sid].append(VisitRecord(sid, int(rec["year"]), dx, feats))
    subjects = []
    for sid in order:
        visits = sorted(by_subject[sid], key=lambda v: v.year)
        baseline = next((v.diagnosis for v in visits if v.year == 0), None)
        subjects.append(SubjectHistory(sid, baseline, visits))
    return subjects


def summary_rows(subjects: Sequence[SubjectHistory], max_year: int) -> list[dict[str, object]]:
    """Counts of labeled subjects per (baseline group, diagnosis, follow-up year),
    using carry-forward labels; year 0 rows give baseline counts."""
    counter: Counter[tuple[str, int, str]] = Counter()
    for s in subjects:
        if s.baseline_diagnosis is None:
            continue
        labels = carry_forward_labels(s, max_year)
        for year, dx in labels.items():
            counter[(s.baseline_diagnosis.name, year, dx.name)] += 1
    rows = [
        {"baseline_group": g, "follow_up_year": y, "diagnosis": d, "n": n}
        for (g, y, d), n in sorted(counter.items())
    ]
    return rows


def write_summary_csv(subjects: Sequence[SubjectHistory], max_year: int, path) -> None:
    rows = summary_rows(subjects, max_year)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["baseline_group", "follow_up_year", "diagnosis", "n"])
        writer.writeheader()
        writer.writerows(rows)
