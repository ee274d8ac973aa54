import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from longprog.cohort import Diagnosis, FeatureValue, SubjectHistory, VisitRecord
from longprog.features import FeatureSchema, FeatureSpec

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    # schema fixtures are immutable, so sharing them across generated inputs is safe
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def make_visit(sid, year, dx, values=None, schema=None):
    """values: feature name -> value (observed), or (value, False) for missing."""
    feats = {}
    if schema is not None:
        for spec in schema.features:
            if spec.kind == "diagnosis":
                continue
            feats[spec.name] = FeatureValue(0.0 if spec.kind == "numeric" else spec.categories[0], True)
        if schema.age_feature in feats:
            feats[schema.age_feature] = FeatureValue(70.0 + year, True)
    for name, v in (values or {}).items():
        if isinstance(v, tuple):
            feats[name] = FeatureValue(v[0], bool(v[1]))
        else:
            feats[name] = FeatureValue(v, True)
    return VisitRecord(sid, year, dx, feats)


def make_subject(sid, dxs, schema=None, values_by_year=None):
    """dxs: iterable of (year, Diagnosis-or-None)."""
    visits = [
        make_visit(sid, year, dx, (values_by_year or {}).get(year), schema)
        for year, dx in dxs
    ]
    return SubjectHistory(sid, visits[0].diagnosis if visits else None, visits)


@pytest.fixture
def tiny_schema():
    """3 numerics + 1 categorical(2) + diagnosis: encoded 6, mask 5, token 12."""
    return FeatureSchema(
        features=(
            FeatureSpec("diagnosis", "diagnosis", modality="STATIC"),
            FeatureSpec("age", "numeric", modality="STATIC"),
            FeatureSpec("score", "numeric", modality="COGN"),
            FeatureSpec("volume", "numeric", modality="MRI"),
            FeatureSpec("sex", "categorical", categories=("F", "M"), modality="STATIC"),
        ),
        age_feature="age",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_token_sequences(rng, schema, stats, n=6):
    """Random token sequences with mixed lengths 1..4 (pre-batching)."""
    from longprog.features import build_token_sequence

    seqs = []
    for i in range(n):
        n_visits = int(rng.integers(1, 5))
        now = 3
        years = [now] + sorted(rng.choice([0, 1, 2], size=n_visits - 1, replace=False).tolist())
        dxs = [(y, Diagnosis(int(rng.integers(0, 2)))) for y in sorted(years)]
        values = {
            y: {"score": float(rng.normal()), "volume": float(rng.normal())} for y, _ in dxs
        }
        subject = make_subject(f"g{i}", dxs, schema=schema, values_by_year=values)
        seqs.append(
            build_token_sequence(subject.visits, now, now + int(rng.integers(1, 6)), schema, stats)
        )
    return seqs


def random_token_batch(rng, schema, stats, n=6):
    """A padded batch of random sequences with mixed lengths 1..4."""
    from longprog.model import TokenBatch

    return TokenBatch.from_sequences(random_token_sequences(rng, schema, stats, n))


def ce_loss(probs, targets):
    return float(np.mean(-np.log(probs[np.arange(len(targets)), targets])))


def ce_dprobs(probs, targets):
    d = np.zeros_like(probs)
    d[np.arange(len(targets)), targets] = -1.0 / (len(targets) * probs[np.arange(len(targets)), targets])
    return d


def finite_difference_check(params, batch, targets, n_coords, rng, eps=1e-4, train_mode=False, dropout_seed=0):
    """Max relative error between backward() and central finite differences
    over n_coords randomly chosen parameter coordinates."""
    from longprog.model import forward, backward

    def run(ps):
        drng = np.random.default_rng(dropout_seed) if train_mode else None
        probs, trace = forward(ps, batch, train_mode=train_mode, dropout_rng=drng)
        return probs, trace

    probs, trace = run(params)
    grads = backward(trace, ce_dprobs(probs, targets))
    coords = []
    names = list(params.arrays)
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        coords.append((name, int(rng.integers(params[name].size))))
    max_rel = 0.0
    for name, flat in coords:
        base = params[name].flat[flat]
        params[name].flat[flat] = base + eps
        lp = ce_loss(run(params)[0], targets)
        params[name].flat[flat] = base - eps
        lm = ce_loss(run(params)[0], targets)
        params[name].flat[flat] = base
        fd = (lp - lm) / (2 * eps)
        an = grads[name].flat[flat]
        # 1e-6 floor: for near-zero gradients the comparison is absolute, so
        # central-difference roundoff (~1e-12) cannot masquerade as error
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


def random_toy_subject(rng, sid, schema, max_year=8):
    """A random small subject history for enumeration oracles: random visit
    years, random CN/MCI/AD/None diagnoses (monotone stages so most pass the
    filter), random feature presence."""
    base = Diagnosis(int(rng.integers(0, 2)))
    conv = int(rng.integers(1, max_year + 2))  # may exceed max_year = never converts
    years = [0] + sorted(
        int(y) for y in rng.choice(np.arange(1, max_year + 1), size=int(rng.integers(0, max_year)), replace=False)
    )
    dxs = []
    for y in years:
        stage = Diagnosis(min(int(base) + (1 if y >= conv else 0), 2))
        if y > 0 and rng.random() < 0.2:
            dxs.append((y, None))
        else:
            dxs.append((y, stage))
    values = {y: {"score": float(rng.normal()), "volume": (0.0, False) if rng.random() < 0.3 else float(rng.normal())} for y in years}
    return make_subject(sid, dxs, schema=schema, values_by_year=values)
