"""Evaluation: history scenarios crossed with modality cases, temporal-bias-
reduced pseudo test sets, ensemble prediction, and the six metrics
(AUROC, balanced accuracy, sensitivity, specificity, AUPR, ECE).

Longitudinal studies observe advanced-stage subjects on a different visit
schedule than stable ones; scoring every eligible (subject, now) pair would
overweight whoever has more visits. A pseudo test set instead keeps exactly
one uniformly drawn eligible now per subject, and metrics are averaged over
many such sets.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .cohort import Diagnosis, SubjectHistory, carry_forward_labels
from .features import COMPLETE_CASE, FeatureSchema, ImputationStats, ModalityCase
from .model import ModelSnapshot, TokenBatch, forward
from .training import (
    HORIZON_YEARS,
    MAX_HISTORY_VISITS,
    EncodedDataset,
    TrajectorySample,
    expand_dataset,
    predict_probs,
    scenario_slot_mask,
)

# one-vs-rest positive class per conversion task (keyed by the stage at now)
POSITIVE_CLASS = {Diagnosis.CN: Diagnosis.MCI, Diagnosis.MCI: Diagnosis.AD}

METRIC_NAMES = ("auroc", "balanced_accuracy", "sensitivity", "specificity", "aupr", "ece")

FREQ_ANNUAL = "annual"
FREQ_BIENNIAL = "biennial"


@dataclass(frozen=True)
class ScenarioSpec:
    """History availability at evaluation: first history year (<= 0),
    collection frequency, and the retained modality case."""

    history_start: int = 0
    frequency: str = FREQ_ANNUAL
    case: ModalityCase = COMPLETE_CASE

    def __post_init__(self) -> None:
        if not -MAX_HISTORY_VISITS < self.history_start <= 0:
            raise ValueError(f"history_start {self.history_start} outside the visit window")
        if self.frequency not in (FREQ_ANNUAL, FREQ_BIENNIAL):
            raise ValueError(f"unknown frequency {self.frequency!r}")

    def offsets(self) -> tuple[int, ...]:
        step = 1 if self.frequency == FREQ_ANNUAL else 2
        return tuple(range(self.history_start, 1, step))

    @property
    def label(self) -> str:
        if self.history_start == 0:
            return "0"
        tag = "Annu." if self.frequency == FREQ_ANNUAL else "Bien."
        return f"{self.history_start} ({tag})"

    def slot_mask(self) -> np.ndarray:
        return scenario_slot_mask(self.offsets())


# the five first-class history settings reported by the evaluation tables
DEFAULT_HISTORY = (
    (0, FREQ_ANNUAL),
    (-1, FREQ_ANNUAL),
    (-2, FREQ_ANNUAL),
    (-2, FREQ_BIENNIAL),
    (-3, FREQ_ANNUAL),
)


def restrict_history(sample: TrajectorySample, spec: ScenarioSpec) -> TrajectorySample | None:
    """Intersect a sample's history with the scenario's years; None when the
    restriction leaves no visit."""
    allowed = {sample.now_year + o for o in spec.offsets()}
    kept = tuple(y for y in sample.history_years if y in allowed)
    if not kept:
        return None
    return replace(sample, history_years=kept)


# ---------------------------------------------------------------------------
# Pseudo test sets
# ---------------------------------------------------------------------------

@dataclass
class PseudoTestSet:
    """One uniformly drawn eligible now per test subject, with its target."""

    group: Diagnosis
    year: int
    entries: list[tuple[str, int, Diagnosis]]  # (subject_id, now_year, label)

    def __len__(self) -> int:
        return len(self.entries)


def _eligible_nows(
    subject: SubjectHistory, group: Diagnosis, year: int
) -> tuple[list[int], dict[int, Diagnosis]]:
    labels = carry_forward_labels(subject, subject.visits[-1].year + year)
    nows = [
        v.year
        for v in subject.visits
        if v.diagnosis == group and (v.year + year) in labels
    ]
    return nows, labels


def build_pseudo_test_set(
    subjects: Sequence[SubjectHistory],
    group: Diagnosis,
    year: int,
    rng: np.random.Generator,
) -> PseudoTestSet:
    """Uniformly pick one eligible now per subject (stage at now = group and
    a label exists `year` years later); subjects with none are omitted."""
    entries: list[tuple[str, int, Diagnosis]] = []
    for subject in subjects:
        nows, labels = _eligible_nows(subject, group, year)
        if not nows:
            continue
        now = nows[int(rng.integers(len(nows)))]
        entries.append((subject.subject_id, now, labels[now + year]))
    if not entries:
        raise ValueError(f"no eligible test subjects for group {group.name} at year {year}")
    return PseudoTestSet(group=group, year=year, entries=entries)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auroc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks (exact)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average rank on ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def threshold_metrics(
    probs: np.ndarray, labels: np.ndarray, positive: int
) -> tuple[float | None, float | None, float | None]:
    """(balanced accuracy, sensitivity, specificity) under 3-class argmax;
    a sample counts predicted-positive iff the argmax is the positive class."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred_pos = probs.argmax(axis=1) == positive
    actual_pos = labels == positive
    tp = int((pred_pos & actual_pos).sum())
    fn = int((~pred_pos & actual_pos).sum())
    tn = int((~pred_pos & ~actual_pos).sum())
    fp = int((pred_pos & ~actual_pos).sum())
    sens = tp / (tp + fn) if (tp + fn) > 0 else None
    spec = tn / (tn + fp) if (tn + fp) > 0 else None
    bacc = (sens + spec) / 2.0 if sens is not None and spec is not None else None
    return bacc, sens, spec


def aupr(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Average precision; equal scores are processed as one group."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    seen = 0
    tp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_tp = int(y[i:j].sum())
        tp += group_tp
        seen = j
        if group_tp:
            ap += (tp / seen) * (group_tp / n_pos)
        i = j
    return float(ap)


def ece(scores: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error: equal-width bins on the positive-class
    probability, gap |accuracy - confidence| weighted by bin occupancy."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    idx = np.minimum((scores * bins).astype(np.int64), bins - 1)
    total = len(scores)
    out = 0.0
    counts = np.bincount(idx, minlength=bins)
    conf_sums = np.bincount(idx, weights=scores, minlength=bins)
    acc_sums = np.bincount(idx, weights=labels, minlength=bins)
    for b in range(bins):
        if counts[b] == 0:
            continue
        out += (counts[b] / total) * abs(acc_sums[b] / counts[b] - conf_sums[b] / counts[b])
    return float(out)


def compute_metrics(probs: np.ndarray, labels3: np.ndarray, positive: int) -> dict:
    """All six metrics for a 3-class probability matrix against 3-class
    labels, with `positive` the one-vs-rest class of interest."""
    scores = probs[:, positive]
    binary = labels3 == positive
    bacc, sens, spec = threshold_metrics(probs, labels3, positive)
    return {
        "auroc": auroc(scores, binary),
        "balanced_accuracy": bacc,
        "sensitivity": sens,
        "specificity": spec,
        "aupr": aupr(scores, binary),
        "ece": ece(scores, binary),
    }


class MetricSummary(NamedTuple):
    mean: float | None
    stderr: float | None
    n: int  # replicates the mean was taken over
    n_undefined: int  # replicates where the metric was undefined


def _summarize(values: list[float], n_undefined: int) -> MetricSummary:
    if not values:
        return MetricSummary(None, None, 0, n_undefined)
    arr = np.asarray(values, dtype=np.float64)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return MetricSummary(float(arr.mean()), stderr, len(arr), n_undefined)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def ensemble_predict(snapshots: Sequence[ModelSnapshot], batch: TokenBatch) -> np.ndarray:
    """Arithmetic mean of each snapshot's class probabilities on one batch."""
    if not snapshots:
        raise ValueError("empty ensemble")
    hashes = {s.schema_hash for s in snapshots}
    if len(hashes) > 1:
        raise ValueError("ensemble snapshots disagree on the feature schema")
    acc = np.zeros((len(batch), 3), dtype=np.float64)
    for s in snapshots:
        probs, _ = forward(s.params, batch)
        acc += probs
    return acc / len(snapshots)


class ScenarioEvaluator:
    """Evaluation cache for one test split.

    Enumerates every eligible (subject, now, follow-up year) triple once,
    encodes it per snapshot (each model keeps its own training-fold
    imputation statistics), and caches ensemble probabilities per
    (modality case, history scenario). Individual cells — (stage group,
    year, scenario) — then reduce to indexing plus metric arithmetic.
    """

    def __init__(
        self,
        snapshots: Sequence[ModelSnapshot],
        schema: FeatureSchema,
        test_subjects: Sequence[SubjectHistory],
        horizon: int = HORIZON_YEARS,
    ):
        if not snapshots:
            raise ValueError("empty ensemble")
        bad = [s for s in snapshots if s.schema_hash != schema.schema_hash]
        if bad:
            raise ValueError("snapshot schema hash does not match the active schema")
        self.schema = schema
        self.snapshots = list(snapshots)
        self.subjects = list(test_subjects)
        self.samples = expand_dataset(self.subjects, horizon=horizon)
        self._datasets = {
            COMPLETE_CASE.label: [
                EncodedDataset.from_samples(
                    self.samples, schema, ImputationStats.from_json_dict(s.stats)
                )
                for s in self.snapshots
            ]
        }
        self._probs_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self.targets3 = np.array([int(s.target) for s in self.samples], dtype=np.int64)
        self.dt = np.array([s.dt for s in self.samples], dtype=np.int64)
        now_dx = []
        for s in self.samples:
            visit = s.subject.visit_at(s.now_year)
            now_dx.append(int(visit.diagnosis))
        self.now_dx = np.array(now_dx, dtype=np.int64)
        # (group, year) -> per-subject eligible sample indices, in subject
        # order; within a subject, in now-year order (matches the pseudo-set
        # builder's draw protocol).
        self._cells: dict[tuple[int, int], list[list[int]]] = {}
        for i, s in enumerate(self.samples):
            key = (int(self.now_dx[i]), int(self.dt[i]))
            cell = self._cells.setdefault(key, [])
            if cell and self.samples[cell[-1][-1]].subject_id == s.subject_id:
                cell[-1].append(i)
            else:
                cell.append([i])

    def _case_datasets(self, case: ModalityCase) -> list[EncodedDataset]:
        if case.label not in self._datasets:
            base = self._datasets[COMPLETE_CASE.label]
            self._datasets[case.label] = [ds.with_case(case) for ds in base]
        return self._datasets[case.label]

    def ensemble_probs(self, spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
        """(probs, kept): ensemble probabilities for every enumerated triple
        under the scenario; kept is False where the history restriction
        leaves no visit (those rows stay zero)."""
        key = (spec.case.label, spec.offsets())
        if key in self._probs_cache:
            return self._probs_cache[key]
        base = self._datasets[COMPLETE_CASE.label][0]
        keep = base.avail & spec.slot_mask()
        kept = keep.any(axis=1)
        probs = np.zeros((len(self.samples), 3), dtype=np.float64)
        idx = np.flatnonzero(kept)
        if len(idx):
            acc = np.zeros((len(idx), 3), dtype=np.float64)
            for snapshot, ds in zip(self.snapshots, self._case_datasets(spec.case)):
                acc += predict_probs(snapshot.params, ds, idx, keep[idx])
            probs[idx] = acc / len(self.snapshots)
        self._probs_cache[key] = (probs, kept)
        return probs, kept

    def evaluate_cell(
        self,
        group: Diagnosis,
        year: int,
        spec: ScenarioSpec,
        n_pseudo: int,
        rng: np.random.Generator,
    ) -> tuple[dict[str, MetricSummary], int]:
        """Metric mean/stderr over n_pseudo pseudo test sets, plus the count
        of selected entries excluded by the history restriction."""
        probs, kept = self.ensemble_probs(spec)
        cell = self._cells.get((int(group), year))
        if not cell:
            raise ValueError(f"no eligible test subjects for group {group.name} at year {year}")
        positive = int(POSITIVE_CLASS[group])
        values: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
        undefined = {m: 0 for m in METRIC_NAMES}
        excluded = 0
        for _ in range(n_pseudo):
            chosen = [options[int(rng.integers(len(options)))] for options in cell]
            use = [i for i in chosen if kept[i]]
            excluded += len(chosen) - len(use)
            if not use:
                for m in METRIC_NAMES:
                    undefined[m] += 1
                continue
            metrics = compute_metrics(probs[use], self.targets3[use], positive)
            for m, v in metrics.items():
                if v is None:
                    undefined[m] += 1
                else:
                    values[m].append(v)
        return {m: _summarize(values[m], undefined[m]) for m in METRIC_NAMES}, excluded

    def evaluate_cell_without_bias_reduction(
        self, group: Diagnosis, year: int, spec: ScenarioSpec
    ) -> dict:
        """Single pass over every eligible (subject, now) pair: subjects with
        several eligible nows contribute several samples."""
        probs, kept = self.ensemble_probs(spec)
        mask = (self.now_dx == int(group)) & (self.dt == year) & kept
        idx = np.flatnonzero(mask)
        if not len(idx):
            raise ValueError(f"no eligible test samples for group {group.name} at year {year}")
        positive = int(POSITIVE_CLASS[group])
        return compute_metrics(probs[idx], self.targets3[idx], positive)


def evaluate_scenario(
    snapshots: Sequence[ModelSnapshot],
    schema: FeatureSchema,
    test_subjects: Sequence[SubjectHistory],
    group: Diagnosis,
    year: int,
    spec: ScenarioSpec,
    n_pseudo: int = 100,
    rng: np.random.Generator | None = None,
) -> dict[str, MetricSummary]:
    """Temporal-bias-reduced metrics for one (group, year, scenario) cell."""
    evaluator = ScenarioEvaluator(
        snapshots, schema, test_subjects, horizon=max(HORIZON_YEARS, year)
    )
    summaries, _ = evaluator.evaluate_cell(
        group, year, spec, n_pseudo, rng if rng is not None else np.random.default_rng(0)
    )
    return summaries


def evaluate_without_bias_reduction(
    snapshots: Sequence[ModelSnapshot],
    schema: FeatureSchema,
    test_subjects: Sequence[SubjectHistory],
    group: Diagnosis,
    year: int,
    spec: ScenarioSpec,
) -> dict:
    evaluator = ScenarioEvaluator(
        snapshots, schema, test_subjects, horizon=max(HORIZON_YEARS, year)
    )
    return evaluator.evaluate_cell_without_bias_reduction(group, year, spec)
