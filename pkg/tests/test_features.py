import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longprog.cohort import Diagnosis, FeatureValue
from longprog.features import (
    COMPLETE_CASE,
    FeatureSchema,
    FeatureSpec,
    ImputationStats,
    ModalityCase,
    append_horizon,
    apply_modality_case,
    build_token_sequence,
    encode_visit,
    fit_imputation_stats,
    imputed_blocks,
)

from conftest import make_subject, make_visit

CN, MCI, AD = Diagnosis.CN, Diagnosis.MCI, Diagnosis.AD


@pytest.fixture
def stats(tiny_schema):
    visits = [
        make_visit("a", 0, CN, {"score": 2.0, "volume": 5.0, "sex": "M", "age": 70.0}),
        make_visit("a", 1, CN, {"score": 4.0, "volume": 5.0, "sex": "M", "age": 71.0}),
        make_visit("b", 0, MCI, {"score": (0.0, False), "volume": 7.0, "sex": "F", "age": 80.0}),
    ]
    return fit_imputation_stats(visits, tiny_schema)


# ---------------------------------------------------------------------------
# fit_imputation_stats
# ---------------------------------------------------------------------------

def test_population_mean_std(stats):
    assert stats.numeric_mean["score"] == 3.0
    assert stats.numeric_std["score"] == 1.0  # population: sqrt((1+1)/2)


def test_mode_majority(stats):
    assert stats.categorical_mode["sex"] == "M"


def test_mode_tie_breaks_by_schema_order(tiny_schema):
    visits = [
        make_visit("a", 0, CN, {"sex": "M", "age": 70.0, "score": 1.0, "volume": 1.0}),
        make_visit("b", 0, CN, {"sex": "F", "age": 70.0, "score": 1.0, "volume": 1.0}),
    ]
    stats = fit_imputation_stats(visits, tiny_schema)
    assert stats.categorical_mode["sex"] == "F"  # ("F", "M") schema order


def test_never_observed_flagged_with_warning(tiny_schema):
    visits = [make_visit("a", 0, CN, {"score": (0.0, False), "age": 70.0, "volume": 1.0, "sex": "F"})]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        stats = fit_imputation_stats(visits, tiny_schema)
    assert "score" in stats.degenerate
    assert any("score" in str(x.message) for x in w)
    assert stats.numeric_mean["score"] == 0.0


def test_constant_feature_degenerate(tiny_schema):
    visits = [make_visit(s, 0, CN, {"volume": 4.0, "age": 70.0, "score": 1.0, "sex": "F"}) for s in "ab"]
    stats = fit_imputation_stats(visits, tiny_schema)
    assert "volume" in stats.degenerate


# ---------------------------------------------------------------------------
# encode_visit
# ---------------------------------------------------------------------------

def test_all_missing_encodes_to_imputation_fixed_point(tiny_schema, stats):
    visit = make_visit("x", 0, None, {n: (None, False) for n in ("age", "score", "volume", "sex")})
    block, mask = encode_visit(visit, tiny_schema, stats)
    assert np.all(mask == 0)
    cols = tiny_schema.column_slices()
    assert block[cols["score"]] == 0.0  # mean, z-scored to 0
    np.testing.assert_array_equal(block[cols["sex"]], [0.0, 1.0])  # mode M one-hot
    assert block[cols["diagnosis"]] == float(stats.diagnosis_mode)


def test_observed_numeric_at_mean_is_zero_with_mask_one(tiny_schema, stats):
    visit = make_visit("x", 0, CN, {"score": 3.0, "age": 70.0, "volume": 5.0, "sex": "F"})
    block, mask = encode_visit(visit, tiny_schema, stats)
    cols = tiny_schema.column_slices()
    assert block[cols["score"]] == 0.0
    assert mask[tiny_schema.mask_index()["score"]] == 1.0


def test_width_arithmetic_oracle():
    schema = FeatureSchema(
        features=(
            FeatureSpec("diagnosis", "diagnosis"),
            FeatureSpec("age", "numeric"),
            FeatureSpec("n1", "numeric"),
            FeatureSpec("n2", "numeric"),
            FeatureSpec("c", "categorical", ("a", "b", "c", "d")),
        ),
    )
    # 3 numerics + 1 categorical(4) + diagnosis
    assert schema.encoded_width == 3 + 4 + 1
    assert schema.mask_width == 5
    assert schema.block_width == 13


def test_diagnosis_is_ordinal_and_ad_rejected(tiny_schema, stats):
    cols = tiny_schema.column_slices()
    b_cn, _ = encode_visit(make_visit("x", 0, CN, {"age": 70.0}), tiny_schema, stats)
    b_mci, _ = encode_visit(make_visit("x", 0, MCI, {"age": 70.0}), tiny_schema, stats)
    assert (b_cn[cols["diagnosis"]], b_mci[cols["diagnosis"]]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        encode_visit(make_visit("x", 0, AD, {"age": 70.0}), tiny_schema, stats)


def test_unknown_category_rejected(tiny_schema, stats):
    with pytest.raises(ValueError, match="sex"):
        encode_visit(make_visit("x", 0, CN, {"sex": "X", "age": 70.0}), tiny_schema, stats)


def test_zscore_round_trip(tiny_schema, stats):
    x = 11.75
    visit = make_visit("x", 0, CN, {"score": x, "age": 70.0, "volume": 5.0, "sex": "F"})
    block, _ = encode_visit(visit, tiny_schema, stats)
    z = block[tiny_schema.column_slices()["score"]][0]
    back = z * stats.numeric_std["score"] + stats.numeric_mean["score"]
    assert abs(back - x) < 1e-12


@given(st.integers(0, 5), st.integers(0, 3), st.integers(1, 4))
def test_width_law_over_random_schemas(n_num, n_cat, cat_width):
    feats = [FeatureSpec("diagnosis", "diagnosis"), FeatureSpec("age", "numeric")]
    feats += [FeatureSpec(f"n{i}", "numeric") for i in range(n_num)]
    feats += [
        FeatureSpec(f"c{i}", "categorical", tuple(f"v{j}" for j in range(cat_width)))
        for i in range(n_cat)
    ]
    schema = FeatureSchema(tuple(feats))
    assert schema.token_width == schema.encoded_width + schema.mask_width + 1


# ---------------------------------------------------------------------------
# horizon
# ---------------------------------------------------------------------------

def test_append_horizon_width_and_value(tiny_schema, stats):
    block, mask = encode_visit(make_visit("x", 0, CN, {"age": 70.0}), tiny_schema, stats)
    token = append_horizon(block, mask, 3)
    assert token.shape == (tiny_schema.token_width,)
    assert token[-1] == 3.0


def test_append_horizon_rejects_nonpositive(tiny_schema, stats):
    block, mask = encode_visit(make_visit("x", 0, CN, {"age": 70.0}), tiny_schema, stats)
    for dt in (0, -1):
        with pytest.raises(ValueError):
            append_horizon(block, mask, dt)


def test_history_visit_horizon_spans_to_target(tiny_schema, stats):
    # now at year 5, target year 8, visit at year 3 -> that token's dt = 5
    subject = make_subject("x", [(3, CN), (5, CN)], schema=tiny_schema)
    seq = build_token_sequence(subject.visits, now_year=5, target_year=8,
                               schema=tiny_schema, stats=stats)
    dt_col = {int(p): t[-1] for t, p, ok in zip(seq.tokens, seq.positions, seq.valid) if ok}
    assert dt_col[2] == 5.0  # position 2 == visit at year 3
    assert dt_col[0] == 3.0


# ---------------------------------------------------------------------------
# modality cases
# ---------------------------------------------------------------------------

def test_complete_case_is_identity(tiny_schema, stats):
    visit = make_visit("x", 0, CN, {"score": 9.0, "volume": 1.0, "age": 70.0, "sex": "F"})
    block, mask = encode_visit(visit, tiny_schema, stats)
    block2, mask2 = apply_modality_case(block, mask, tiny_schema, stats, COMPLETE_CASE)
    np.testing.assert_array_equal(block, block2)
    np.testing.assert_array_equal(mask, mask2)


def test_dropping_cognitive_scores_imputes_and_flips_mask(tiny_schema, stats):
    visit = make_visit("x", 0, CN, {"score": 27.0, "volume": 1.0, "age": 70.0, "sex": "F"})
    block, mask = encode_visit(visit, tiny_schema, stats)
    block2, mask2 = apply_modality_case(block, mask, tiny_schema, stats, ModalityCase(frozenset({"MRI"})))
    cols = tiny_schema.column_slices()
    assert block2[cols["score"]] == 0.0  # train mean, z-scored
    assert mask2[tiny_schema.mask_index()["score"]] == 0.0
    # MRI retained, statics and diagnosis untouched
    np.testing.assert_array_equal(block2[cols["volume"]], block[cols["volume"]])
    np.testing.assert_array_equal(block2[cols["sex"]], block[cols["sex"]])
    np.testing.assert_array_equal(block2[cols["diagnosis"]], block[cols["diagnosis"]])
    assert mask2[tiny_schema.mask_index()["age"]] == mask[tiny_schema.mask_index()["age"]]


@given(st.floats(-50, 50), st.floats(-50, 50), st.booleans(), st.booleans())
def test_modality_case_idempotent(tiny_schema, score, volume, obs_s, obs_v):
    stats = fit_imputation_stats(
        [make_visit("a", 0, CN, {"score": 2.0, "volume": 4.0, "age": 70.0, "sex": "F"}),
         make_visit("b", 0, CN, {"score": 6.0, "volume": 8.0, "age": 72.0, "sex": "M"})],
        tiny_schema,
    )
    visit = make_visit("x", 0, CN, {"score": (score, obs_s), "volume": (volume, obs_v), "age": 70.0, "sex": "F"})
    block, mask = encode_visit(visit, tiny_schema, stats)
    case = ModalityCase(frozenset({"COGN"}))
    once = apply_modality_case(block, mask, tiny_schema, stats, case)
    twice = apply_modality_case(once[0], once[1], tiny_schema, stats, case)
    np.testing.assert_array_equal(once[0], twice[0])
    np.testing.assert_array_equal(once[1], twice[1])



def test_modality_case_requires_nonempty():
    with pytest.raises(ValueError):
        ModalityCase(frozenset())


def test_case_label_ordering():
    assert ModalityCase(frozenset({"CSF", "COGN"})).label == "COGN+CSF"


# ---------------------------------------------------------------------------
# mask faithfulness & leakage
# ---------------------------------------------------------------------------

def test_mask_faithful_to_observed_flags_and_case(tiny_schema, stats):
    visit = make_visit("x", 0, CN, {"score": 1.0, "volume": (0.0, False), "age": 70.0, "sex": "F"})
    block, mask = encode_visit(visit, tiny_schema, stats)
    mi = tiny_schema.mask_index()
    assert mask[mi["score"]] == 1.0 and mask[mi["volume"]] == 0.0
    _, mask2 = apply_modality_case(block, mask, tiny_schema, stats, ModalityCase(frozenset({"MRI"})))
    assert mask2[mi["score"]] == 0.0  # dropped modality
    assert mask2[mi["volume"]] == 0.0  # was unobserved anyway


def test_no_leakage_from_held_out_visits(tiny_schema):
    train = [make_visit("a", 0, CN, {"score": 2.0, "volume": 3.0, "age": 70.0, "sex": "F"}),
             make_visit("b", 0, CN, {"score": 4.0, "volume": 5.0, "age": 75.0, "sex": "M"})]
    held_out = make_visit("z", 0, CN, {"score": 1e6, "volume": -1e6, "age": 99.0, "sex": "M"})
    stats = fit_imputation_stats(train, tiny_schema)
    before = [encode_visit(v, tiny_schema, stats) for v in train]
    held_out.features["score"] = FeatureValue(-123.0, True)  # mutate held-out data
    after = [encode_visit(v, tiny_schema, stats) for v in train]
    for (b1, m1), (b2, m2) in zip(before, after):
        np.testing.assert_array_equal(b1, b2)
        np.testing.assert_array_equal(m1, m2)


# ---------------------------------------------------------------------------
# build_token_sequence
# ---------------------------------------------------------------------------

def test_two_visit_positions(tiny_schema, stats):
    subject = make_subject("x", [(3, CN), (5, CN)], schema=tiny_schema)
    seq = build_token_sequence(subject.visits, 5, 6, tiny_schema, stats)
    assert seq.n_valid == 2
    assert sorted(int(p) for p, ok in zip(seq.positions, seq.valid) if ok) == [0, 2]


def test_single_now_visit(tiny_schema, stats):
    subject = make_subject("x", [(4, MCI)], schema=tiny_schema)
    seq = build_token_sequence(subject.visits, 4, 5, tiny_schema, stats)
    assert seq.n_valid == 1
    assert [int(p) for p, ok in zip(seq.positions, seq.valid) if ok] == [0]


def test_padding_validity_masks(tiny_schema, stats):
    one = make_subject("x", [(0, CN)], schema=tiny_schema)
    four = make_subject("y", [(0, CN), (1, CN), (2, CN), (3, CN)], schema=tiny_schema)
    seq1 = build_token_sequence(one.visits, 0, 1, tiny_schema, stats)
    seq4 = build_token_sequence(four.visits, 3, 4, tiny_schema, stats)
    assert list(seq1.valid) == [True, False, False, False]
    assert list(seq4.valid) == [True, True, True, True]


def test_empty_history_rejected(tiny_schema, stats):
    with pytest.raises(ValueError):
        build_token_sequence([], 0, 1, tiny_schema, stats)


def test_out_of_window_history_rejected(tiny_schema, stats):
    subject = make_subject("x", [(0, CN), (5, CN)], schema=tiny_schema)
    with pytest.raises(ValueError):
        build_token_sequence(subject.visits, 5, 6, tiny_schema, stats)


def test_imputed_blocks_match_all_missing_visit(tiny_schema, stats):
    visit = make_visit("x", 0, None, {n: (None, False) for n in ("age", "score", "volume", "sex")})
    block, mask = encode_visit(visit, tiny_schema, stats)
    iblock, imask = imputed_blocks(tiny_schema, stats)
    np.testing.assert_array_equal(block, iblock)
    np.testing.assert_array_equal(mask, imask)


def test_stats_json_round_trip(stats):
    back = ImputationStats.from_json_dict(stats.to_json_dict())
    assert back == stats
