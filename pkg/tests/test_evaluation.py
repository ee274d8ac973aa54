"""History-scenario restriction, pseudo test sets, the six metrics,
ensembling, and the per-cell evaluator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_subject
from longprog.cohort import Diagnosis
from longprog.features import fit_imputation_stats
from longprog.model import ModelConfig, ModelSnapshot, TokenBatch, forward, init_params
from longprog.evaluation import (
    DEFAULT_HISTORY,
    FREQ_ANNUAL,
    FREQ_BIENNIAL,
    METRIC_NAMES,
    MetricSummary,
    PseudoTestSet,
    ScenarioEvaluator,
    ScenarioSpec,
    _summarize,
    aupr,
    auroc,
    build_pseudo_test_set,
    compute_metrics,
    ece,
    ensemble_predict,
    evaluate_scenario,
    evaluate_without_bias_reduction,
    restrict_history,
    threshold_metrics,
)
from longprog.training import EncodedDataset, expand_dataset, predict_probs

CN, MCI, AD = Diagnosis.CN, Diagnosis.MCI, Diagnosis.AD
FULL = ScenarioSpec(history_start=-3, frequency=FREQ_ANNUAL)


# ---------------------------------------------------------------------------
# Scenario specs and history restriction
# ---------------------------------------------------------------------------


def test_scenario_offsets():
    assert ScenarioSpec(0, FREQ_ANNUAL).offsets() == (0,)
    assert ScenarioSpec(-2, FREQ_ANNUAL).offsets() == (-2, -1, 0)
    assert ScenarioSpec(-2, FREQ_BIENNIAL).offsets() == (-2, 0)
    assert ScenarioSpec(-3, FREQ_ANNUAL).offsets() == (-3, -2, -1, 0)


def test_scenario_labels_and_validation():
    assert ScenarioSpec(0, FREQ_ANNUAL).label == "0"
    assert ScenarioSpec(-2, FREQ_BIENNIAL).label == "-2 (Bien.)"
    assert ScenarioSpec(-3, FREQ_ANNUAL).label == "-3 (Annu.)"
    with pytest.raises(ValueError):
        ScenarioSpec(-4, FREQ_ANNUAL)
    with pytest.raises(ValueError):
        ScenarioSpec(1, FREQ_ANNUAL)
    with pytest.raises(ValueError):
        ScenarioSpec(0, "monthly")


def test_default_history_table():
    assert DEFAULT_HISTORY == (
        (0, FREQ_ANNUAL),
        (-1, FREQ_ANNUAL),
        (-2, FREQ_ANNUAL),
        (-2, FREQ_BIENNIAL),
        (-3, FREQ_ANNUAL),
    )


def _sample_with_history(tiny_schema, dxs, now):
    subj = make_subject("r", dxs, schema=tiny_schema)
    matches = [s for s in expand_dataset([subj]) if s.now_year == now]
    assert matches
    return matches[0]


def test_restrict_history_examples(tiny_schema):
    # visits at now-3, now-1, now; now-only spec keeps just now
    s = _sample_with_history(tiny_schema, [(0, CN), (2, CN), (3, CN), (4, MCI)], now=3)
    assert s.history_years == (0, 2, 3)
    assert restrict_history(s, ScenarioSpec(0, FREQ_ANNUAL)).history_years == (3,)
    # biennial from -2 keeps {-2, 0} and drops the in-between year
    s = _sample_with_history(tiny_schema, [(1, CN), (2, CN), (3, CN), (4, MCI)], now=3)
    assert s.history_years == (1, 2, 3)
    assert restrict_history(s, ScenarioSpec(-2, FREQ_BIENNIAL)).history_years == (1, 3)
    assert restrict_history(s, ScenarioSpec(-2, FREQ_ANNUAL)).history_years == (1, 2, 3)


def test_restrict_history_intersects_with_what_exists(tiny_schema):
    # only a year -1 visit available: the -3 annual window keeps it
    subj = make_subject("r", [(0, CN), (3, CN), (4, MCI)], schema=tiny_schema)
    s = next(x for x in expand_dataset([subj]) if x.now_year == 4)
    assert s.history_years == (3, 4)
    from dataclasses import replace

    s = replace(s, history_years=(3,))
    out = restrict_history(s, ScenarioSpec(-3, FREQ_ANNUAL))
    assert out.history_years == (3,)
    # a spec that misses every remaining visit excludes the sample
    assert restrict_history(s, ScenarioSpec(0, FREQ_ANNUAL)) is None


# ---------------------------------------------------------------------------
# Pseudo test sets
# ---------------------------------------------------------------------------


def _eval_cohort(tiny_schema):
    """Subjects with known eligible (group, now) structure."""
    rng = np.random.default_rng(0)
    out = []
    rosters = [
        # (id, dxs): conversion times vary so CN and MCI cells both exist
        ("c0", [(0, CN), (1, CN), (2, MCI), (3, MCI)]),
        ("c1", [(0, CN), (1, MCI), (2, MCI), (3, AD)]),
        ("c2", [(0, CN), (1, CN), (2, CN), (3, CN), (4, CN)]),
        ("c3", [(0, CN), (2, CN), (4, MCI)]),
        ("m0", [(0, MCI), (1, MCI), (2, AD)]),
        ("m1", [(0, MCI), (2, MCI), (4, MCI)]),
        ("m2", [(0, MCI), (1, AD)]),
    ]
    for sid, dxs in rosters:
        values = {
            y: {"score": float(rng.normal()), "volume": float(rng.normal())}
            for y, _ in dxs
        }
        out.append(make_subject(sid, dxs, schema=tiny_schema, values_by_year=values))
    return out


def test_pseudo_set_single_eligible_now_is_always_chosen(tiny_schema):
    subjects = _eval_cohort(tiny_schema)
    # for (CN, +1): c2 has nows {0,1,2,3}; c0 {0,1}; c1 {0}; c3 none (no label at 1/3/5)
    for seed in range(5):
        ps = build_pseudo_test_set(subjects, CN, 1, np.random.default_rng(seed))
        by_id = dict((sid, now) for sid, now, _ in ps.entries)
        assert by_id["c1"] == 0
        assert set(by_id) == {"c0", "c1", "c2"}
    assert ps.group == CN and ps.year == 1


def test_pseudo_set_subjects_appear_at_most_once(tiny_schema):
    subjects = _eval_cohort(tiny_schema)
    ps = build_pseudo_test_set(subjects, MCI, 1, np.random.default_rng(3))
    ids = [sid for sid, _, _ in ps.entries]
    assert len(ids) == len(set(ids))


def test_pseudo_set_carries_forward_labels(tiny_schema):
    subjects = _eval_cohort(tiny_schema)
    # m2 converts at year 1; for (MCI, +2) its only now is 0, label AD at 2
    ps = build_pseudo_test_set(subjects, MCI, 2, np.random.default_rng(0))
    by_id = {sid: (now, label) for sid, now, label in ps.entries}
    assert by_id["m2"] == (0, AD)


def test_pseudo_set_draws_uniformly(tiny_schema):
    subj = make_subject(
        "u", [(0, CN), (1, CN), (2, CN), (3, MCI), (4, MCI), (5, MCI)], schema=tiny_schema
    )
    # (CN, +3): eligible nows {0, 1, 2} (labels exist at 3, 4, 5)
    rng = np.random.default_rng(7)
    n = 30000
    counts = {0: 0, 1: 0, 2: 0}
    for _ in range(n):
        ps = build_pseudo_test_set([subj], CN, 3, rng)
        counts[ps.entries[0][1]] += 1
    sigma = math.sqrt((1 / 3) * (2 / 3) / n)
    for year in counts:
        assert abs(counts[year] / n - 1 / 3) < 3 * sigma


def test_pseudo_set_empty_is_an_error(tiny_schema):
    subjects = [make_subject("a", [(0, CN), (1, CN)], schema=tiny_schema)]
    with pytest.raises(ValueError, match="CN.*3|3.*CN"):
        build_pseudo_test_set(subjects, CN, 3, np.random.default_rng(0))


def test_pseudo_set_group_is_the_stage_at_now(tiny_schema):
    # c1 is CN at 0 and MCI at 1/2: it appears in MCI sets only via those nows
    subjects = _eval_cohort(tiny_schema)
    ps = build_pseudo_test_set(subjects, MCI, 1, np.random.default_rng(1))
    by_id = {sid: now for sid, now, _ in ps.entries}
    assert by_id["c1"] in (1, 2)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_auroc_worked_example():
    scores = np.array([0.9, 0.8, 0.85, 0.7])
    labels = np.array([1, 1, 0, 0])
    assert auroc(scores, labels) == 0.75


def test_auroc_edges():
    assert auroc(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0
    assert auroc(np.array([0.5, 0.5, 0.5, 0.5]), np.array([1, 0, 1, 0])) == 0.5
    assert auroc(np.array([0.2, 0.4]), np.array([1, 1])) is None
    assert auroc(np.array([0.2, 0.4]), np.array([0, 0])) is None


def pairwise_auroc(scores, labels):
    pos = scores[labels.astype(bool)]
    neg = scores[~labels.astype(bool)]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


@settings(max_examples=60)
@given(
    seed=st.integers(0, 10**6),
    n=st.integers(2, 60),
    levels=st.integers(2, 8),
)
def test_auroc_equals_pairwise_counting(seed, n, levels):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, levels, size=n) / (levels - 1)  # plenty of ties
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert auroc(scores, labels) == pairwise_auroc(scores, labels)


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6))
def test_auroc_invariant_under_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(30)
    labels = rng.integers(0, 2, size=30)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert auroc(scores, labels) == auroc(0.1 + 0.5 * scores, labels)
    assert auroc(scores, labels) == auroc(np.exp(scores), labels)


def test_threshold_metrics_worked_example():
    # 2 TP, 1 FN, 3 TN, 1 FP with positive class 1
    probs = np.array(
        [
            [0.1, 0.8, 0.1],  # TP
            [0.2, 0.7, 0.1],  # TP
            [0.6, 0.3, 0.1],  # FN
            [0.9, 0.05, 0.05],  # TN
            [0.5, 0.2, 0.3],  # TN
            [0.1, 0.2, 0.7],  # TN
            [0.2, 0.6, 0.2],  # FP
        ]
    )
    labels = np.array([1, 1, 1, 0, 0, 2, 0])
    bacc, sens, spec = threshold_metrics(probs, labels, positive=1)
    assert sens == pytest.approx(2 / 3, abs=1e-15)
    assert spec == pytest.approx(3 / 4, abs=1e-15)
    assert bacc == pytest.approx(17 / 24, abs=1e-15)


def test_threshold_metrics_perfect_and_missing_class():
    probs = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1]])
    bacc, sens, spec = threshold_metrics(probs, np.array([1, 0]), positive=1)
    assert (bacc, sens, spec) == (1.0, 1.0, 1.0)
    bacc, sens, spec = threshold_metrics(probs, np.array([1, 1]), positive=1)
    assert sens == 0.5 and spec is None and bacc is None


def test_threshold_metrics_definition():
    # sens 1.0 with spec 0.5 averages to 0.75
    probs = np.array([[0.1, 0.9, 0.0], [0.4, 0.6, 0.0], [0.2, 0.8, 0.0], [0.9, 0.1, 0.0]])
    labels = np.array([1, 1, 0, 0])
    bacc, sens, spec = threshold_metrics(probs, labels, positive=1)
    assert (sens, spec, bacc) == (1.0, 0.5, 0.75)


def test_aupr_worked_examples():
    # single positive ranked last of four
    assert aupr(np.array([0.9, 0.8, 0.7, 0.6]), np.array([0, 0, 0, 1])) == 0.25
    # perfect ranking
    assert aupr(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0
    # no positives -> undefined
    assert aupr(np.array([0.9, 0.1]), np.array([0, 0])) is None
    # one tie group: average precision collapses to prevalence
    assert aupr(np.full(8, 0.3), np.array([1, 0, 0, 1, 0, 0, 0, 0])) == 0.25


def sweep_aupr(scores, labels):
    """Average precision via an explicit descending threshold sweep."""
    labels = labels.astype(bool)
    n_pos = labels.sum()
    precisions, recalls = [], [0.0]
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = (pred & labels).sum()
        precisions.append(tp / pred.sum())
        recalls.append(tp / n_pos)
    return float(sum(p * (r1 - r0) for p, r0, r1 in zip(precisions, recalls, recalls[1:])))


@settings(max_examples=60)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 50), levels=st.integers(2, 6))
def test_aupr_matches_threshold_sweep(seed, n, levels):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, levels, size=n) / (levels - 1)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    assert aupr(scores, labels) == pytest.approx(sweep_aupr(scores, labels), rel=1e-12)


def test_aupr_random_permutations_average_to_prevalence():
    # E[AP] under a random ranking tends to the prevalence (the small positive
    # finite-sample bias decays like 1/n_pos, hence the large set)
    rng = np.random.default_rng(5)
    scores = rng.random(2000)
    base = np.array([1] * 500 + [0] * 1500)
    vals = np.asarray([aupr(scores, rng.permutation(base)) for _ in range(300)])
    sigma = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 0.25) < 3 * sigma + 0.005


def test_ece_worked_example():
    scores = np.array([0.15, 0.15, 0.95, 0.95])
    labels = np.array([0, 1, 1, 1])
    assert ece(scores, labels) == pytest.approx(0.2, abs=1e-15)


def test_ece_edges():
    assert ece(np.full(10, 0.5), np.array([1, 0] * 5)) == 0.0
    # the boundary score 1.0 lands in the top bin
    assert ece(np.ones(4), np.zeros(4)) == 1.0
    # one bin: overall |accuracy - confidence|
    assert ece(np.array([0.2, 0.4]), np.array([1, 1]), bins=1) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        ece(np.array([0.5]), np.array([1]), bins=0)


def test_ece_binning_is_equal_width():
    # 0.299 and 0.301 straddle the 0.3 boundary of 10 bins
    scores = np.array([0.299, 0.301])
    labels = np.array([0, 1])
    expected = 0.5 * abs(0 - 0.299) + 0.5 * abs(1 - 0.301)
    assert ece(scores, labels) == pytest.approx(expected, abs=1e-15)


def test_compute_metrics_keys_and_score_column():
    probs = np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.1, 0.2, 0.7]])
    labels = np.array([1, 0, 2])
    out = compute_metrics(probs, labels, positive=1)
    assert set(out) == set(METRIC_NAMES)
    assert out["auroc"] == auroc(probs[:, 1], labels == 1)
    assert out["aupr"] == aupr(probs[:, 1], labels == 1)
    assert out["ece"] == ece(probs[:, 1], (labels == 1).astype(float))


def test_summarize():
    assert _summarize([], 3) == MetricSummary(None, None, 0, 3)
    assert _summarize([0.5], 0) == MetricSummary(0.5, 0.0, 1, 0)
    out = _summarize([0.4, 0.6], 1)
    assert out.mean == pytest.approx(0.5)
    assert out.stderr == pytest.approx(np.std([0.4, 0.6], ddof=1) / math.sqrt(2))
    assert (out.n, out.n_undefined) == (2, 1)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def _snapshot(tiny_schema, stats, seed, hidden=8):
    cfg = ModelConfig(
        token_width=tiny_schema.token_width, hidden_dim=hidden, n_heads=2,
        classifier=(3,), age_mean=stats.age_mean, age_std=stats.age_std,
    )
    return ModelSnapshot(
        params=init_params(cfg, seed=seed),
        schema_hash=tiny_schema.schema_hash,
        seed=seed,
        stats=stats.to_json_dict(),
    )


def _eval_setup(tiny_schema, n_snapshots=2):
    subjects = _eval_cohort(tiny_schema)
    visits = [v for s in subjects for v in s.visits]
    stats = fit_imputation_stats(visits, tiny_schema)
    snapshots = [_snapshot(tiny_schema, stats, seed) for seed in range(n_snapshots)]
    return subjects, stats, snapshots


def test_ensemble_predict_mean_law(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema)
    ds = EncodedDataset.from_samples(expand_dataset(subjects), tiny_schema, stats)
    from longprog.training import assemble_batch

    batch = assemble_batch(ds, np.arange(6), ds.avail[:6])
    out = ensemble_predict(snapshots, batch)
    p0, _ = forward(snapshots[0].params, batch)
    p1, _ = forward(snapshots[1].params, batch)
    assert np.allclose(out, (p0 + p1) / 2, atol=1e-15)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    solo = ensemble_predict([snapshots[0]] * 3, batch)
    assert np.allclose(solo, p0, atol=1e-15)


def test_ensemble_predict_rejects_mixed_schemas(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema)
    from dataclasses import replace

    bad = replace(snapshots[1], schema_hash="0000")
    ds = EncodedDataset.from_samples(expand_dataset(subjects), tiny_schema, stats)
    from longprog.training import assemble_batch

    batch = assemble_batch(ds, np.arange(2), ds.avail[:2])
    with pytest.raises(ValueError, match="schema"):
        ensemble_predict([snapshots[0], bad], batch)
    with pytest.raises(ValueError, match="empty"):
        ensemble_predict([], batch)


# ---------------------------------------------------------------------------
# The scenario evaluator
# ---------------------------------------------------------------------------


def test_evaluator_full_history_equals_unrestricted_probs(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    probs, kept = ev.ensemble_probs(FULL)
    assert kept.all()  # every sample keeps at least its now visit
    ds = EncodedDataset.from_samples(ev.samples, tiny_schema, stats)
    direct = predict_probs(snapshots[0].params, ds, np.arange(len(ds)), ds.avail)
    assert np.array_equal(probs, direct)


def test_evaluator_two_model_mean(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=2)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    probs, _ = ev.ensemble_probs(FULL)
    ds = EncodedDataset.from_samples(ev.samples, tiny_schema, stats)
    idx = np.arange(len(ds))
    a = predict_probs(snapshots[0].params, ds, idx, ds.avail)
    b = predict_probs(snapshots[1].params, ds, idx, ds.avail)
    assert np.allclose(probs, (a + b) / 2, atol=1e-15)


def test_evaluator_rejects_schema_mismatch_and_empty(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    from dataclasses import replace

    bad = replace(snapshots[0], schema_hash="f00d")
    with pytest.raises(ValueError, match="schema"):
        ScenarioEvaluator([bad], tiny_schema, subjects)
    with pytest.raises(ValueError, match="empty"):
        ScenarioEvaluator([], tiny_schema, subjects)


def test_evaluate_cell_matches_manual_pseudo_set_replay(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=2)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    spec = ScenarioSpec(-2, FREQ_ANNUAL)
    n_pseudo = 4
    summaries, excluded = ev.evaluate_cell(CN, 1, spec, n_pseudo, np.random.default_rng(99))
    assert excluded == 0  # the now visit always survives a now-anchored window

    probs, _ = ev.ensemble_probs(spec)
    where = {
        (s.subject_id, s.now_year, s.dt): i for i, s in enumerate(ev.samples)
    }
    rng = np.random.default_rng(99)
    per_set: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    undefined = {m: 0 for m in METRIC_NAMES}
    for _ in range(n_pseudo):
        ps = build_pseudo_test_set(subjects, CN, 1, rng)
        idx = [where[(sid, now, 1)] for sid, now, _ in ps.entries]
        labels3 = np.array([int(label) for _, _, label in ps.entries])
        assert np.array_equal(ev.targets3[idx], labels3)
        got = compute_metrics(probs[idx], labels3, positive=int(MCI))
        for m, v in got.items():
            if v is None:
                undefined[m] += 1
            else:
                per_set[m].append(v)
    for m in METRIC_NAMES:
        expected = _summarize(per_set[m], undefined[m])
        assert summaries[m] == expected


def test_evaluate_cell_deterministic_sets_have_zero_stderr(tiny_schema):
    # every subject has exactly one eligible (CN, +1) now
    subjects = [
        make_subject(f"d{i}", [(0, CN), (1, MCI if i % 2 else CN)], schema=tiny_schema)
        for i in range(6)
    ]
    visits = [v for s in subjects for v in s.visits]
    stats = fit_imputation_stats(visits, tiny_schema)
    snapshots = [_snapshot(tiny_schema, stats, 0)]
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    summaries, _ = ev.evaluate_cell(CN, 1, FULL, 5, np.random.default_rng(0))
    for m in METRIC_NAMES:
        if summaries[m].mean is not None:
            assert summaries[m].stderr == 0.0
            assert summaries[m].n == 5


def test_evaluate_cell_single_set_has_zero_stderr(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    summaries, _ = ev.evaluate_cell(CN, 1, FULL, 1, np.random.default_rng(1))
    assert summaries["ece"].stderr == 0.0
    assert summaries["ece"].n == 1


def test_evaluate_cell_counts_undefined_metrics(tiny_schema):
    # all subjects convert: CN->MCI at +1 has only positive labels
    subjects = [
        make_subject(f"p{i}", [(0, CN), (1, MCI)], schema=tiny_schema) for i in range(4)
    ]
    visits = [v for s in subjects for v in s.visits]
    stats = fit_imputation_stats(visits, tiny_schema)
    snapshots = [_snapshot(tiny_schema, stats, 2)]
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    summaries, _ = ev.evaluate_cell(CN, 1, FULL, 3, np.random.default_rng(0))
    assert summaries["auroc"].mean is None
    assert summaries["auroc"].n_undefined == 3
    assert summaries["ece"].n == 3  # calibration is still defined


def test_evaluate_cell_unknown_cell_is_an_error(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    with pytest.raises(ValueError, match="CN"):
        ev.evaluate_cell(CN, 6, FULL, 2, np.random.default_rng(0))


def test_bias_unreduced_cell_counts_every_eligible_now(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    # (CN, +1) eligible (subject, now) pairs: c0 {0,1}, c1 {0}, c2 {0,1,2,3}
    mask = (ev.now_dx == int(CN)) & (ev.dt == 1)
    assert int(mask.sum()) == 7
    out = ev.evaluate_cell_without_bias_reduction(CN, 1, FULL)
    probs, _ = ev.ensemble_probs(FULL)
    idx = np.flatnonzero(mask)
    expected = compute_metrics(probs[idx], ev.targets3[idx], positive=int(MCI))
    assert out == expected
    with pytest.raises(ValueError):
        ev.evaluate_cell_without_bias_reduction(CN, 6, FULL)


def test_convenience_wrappers(tiny_schema):
    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    out = evaluate_scenario(
        snapshots, tiny_schema, subjects, CN, 1, FULL, n_pseudo=2,
        rng=np.random.default_rng(5),
    )
    assert set(out) == set(METRIC_NAMES)
    assert 0.0 <= out["ece"].mean <= 1.0
    flat = evaluate_without_bias_reduction(snapshots, tiny_schema, subjects, CN, 1, FULL)
    assert set(flat) == set(METRIC_NAMES)


def test_modality_case_changes_only_masked_features(tiny_schema):
    """Dropping a modality at evaluation changes predictions but keeps the
    complete-case cache intact."""
    from longprog.features import ModalityCase

    subjects, stats, snapshots = _eval_setup(tiny_schema, n_snapshots=1)
    ev = ScenarioEvaluator(snapshots, tiny_schema, subjects)
    full_probs, _ = ev.ensemble_probs(FULL)
    cogn_only = ScenarioSpec(-3, FREQ_ANNUAL, case=ModalityCase.of("COGN"))
    reduced, kept = ev.ensemble_probs(cogn_only)
    assert kept.all()
    assert reduced.shape == full_probs.shape
    assert not np.allclose(reduced, full_probs)
    again, _ = ev.ensemble_probs(FULL)
    assert np.array_equal(again, full_probs)
