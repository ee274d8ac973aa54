"""Visit encoding: missingness masks, train-fitted imputation, tokens.

A visit becomes a fixed-width vector laid out [encoded features | mask bits |
dt], where dt is the number of years between the visit and the prediction
target. Numeric features are z-scored with training statistics, categoricals
one-hot encoded, the diagnosis enters as an ordinal scalar (CN=0, MCI=1 —
AD visits never feed the model), and each feature contributes one mask bit
(1 = observed).
"""
from __future__ import annotations

import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cohort import Diagnosis, SubjectHistory, VisitRecord

KIND_NUMERIC = "numeric"
KIND_CATEGORICAL = "categorical"
KIND_DIAGNOSIS = "diagnosis"
MODALITIES = ("COGN", "MRI", "CSF", "STATIC")

MAX_HISTORY_VISITS = 4  # now plus up to three prior years


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # numeric | categorical | diagnosis
    categories: tuple[str, ...] = ()
    modality: str = "STATIC"

    def __post_init__(self) -> None:
        if self.kind not in (KIND_NUMERIC, KIND_CATEGORICAL, KIND_DIAGNOSIS):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"{self.name}: unknown modality {self.modality!r}")
        if self.kind == KIND_CATEGORICAL and not self.categories:
            raise ValueError(f"{self.name}: categorical feature needs categories")
        if self.kind != KIND_CATEGORICAL and self.categories:
            raise ValueError(f"{self.name}: only categorical features take categories")

    @property
    def encoded_width(self) -> int:
        return len(self.categories) if self.kind == KIND_CATEGORICAL else 1


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature descriptors; fixes the token layout."""

    features: tuple[FeatureSpec, ...]
    age_feature: str = "age"

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if sum(f.kind == KIND_DIAGNOSIS for f in self.features) != 1:
            raise ValueError("schema needs exactly one diagnosis feature")
        if self.age_feature not in names:
            raise ValueError(f"age feature {self.age_feature!r} not in schema")
        age = self.by_name[self.age_feature]
        if age.kind != KIND_NUMERIC:
            raise ValueError("age feature must be numeric")

    @property
    def by_name(self) -> dict[str, FeatureSpec]:
        return {f.name: f for f in self.features}

    @property
    def encoded_width(self) -> int:
        return sum(f.encoded_width for f in self.features)

    @property
    def mask_width(self) -> int:
        return len(self.features)

    @property
    def block_width(self) -> int:
        return self.encoded_width + self.mask_width

    @property
    def token_width(self) -> int:
        # feature block + mask block + dt slot
        return self.block_width + 1

    def column_slices(self) -> dict[str, slice]:
        """Feature name -> columns of its encoded values within the block."""
        out: dict[str, slice] = {}
        offset = 0
        for f in self.features:
            out[f.name] = slice(offset, offset + f.encoded_width)
            offset += f.encoded_width
        return out

    def mask_index(self) -> dict[str, int]:
        return {f.name: i for i, f in enumerate(self.features)}

    def to_json_dict(self) -> dict:
        return {
            "age_feature": self.age_feature,
            "features": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "categories": list(f.categories),
                    "modality": f.modality,
                }
                for f in self.features
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "FeatureSchema":
        feats = tuple(
            FeatureSpec(
                name=entry["name"],
                kind=entry["kind"],
                categories=tuple(entry.get("categories", ())),
                modality=entry.get("modality", "STATIC"),
            )
            for entry in data["features"]
        )
        return cls(feats, age_feature=data.get("age_feature", "age"))

    @property
    def schema_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_schema() -> FeatureSchema:
    """Compact ADNI-like schema: cognition, MRI volumes, CSF assays, statics."""
    feats = (
        FeatureSpec("diagnosis", KIND_DIAGNOSIS, modality="COGN"),
        FeatureSpec("age", KIND_NUMERIC, modality="STATIC"),
        FeatureSpec("sex", KIND_CATEGORICAL, ("F", "M"), modality="STATIC"),
        FeatureSpec("education_years", KIND_NUMERIC, modality="STATIC"),
        FeatureSpec("apoe4_alleles", KIND_CATEGORICAL, ("0", "1", "2"), modality="STATIC"),
        FeatureSpec("memory_score", KIND_NUMERIC, modality="COGN"),
        FeatureSpec("attention_score", KIND_NUMERIC, modality="COGN"),
        FeatureSpec("fluency_score", KIND_NUMERIC, modality="COGN"),
        FeatureSpec("hippocampus_volume", KIND_NUMERIC, modality="MRI"),
        FeatureSpec("entorhinal_thickness", KIND_NUMERIC, modality="MRI"),
        FeatureSpec("ventricle_volume", KIND_NUMERIC, modality="MRI"),
        FeatureSpec("csf_abeta", KIND_NUMERIC, modality="CSF"),
        FeatureSpec("csf_tau", KIND_NUMERIC, modality="CSF"),
    )
    return FeatureSchema(feats)


# ---------------------------------------------------------------------------
# Imputation statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImputationStats:
    """Train-split means/stds and modes, plus age normalization stats."""

    numeric_mean: dict[str, float]
    numeric_std: dict[str, float]  # population (N) convention
    degenerate: frozenset[str]  # numerics never observed or with zero spread
    categorical_mode: dict[str, str]
    diagnosis_mode: Diagnosis
    age_mean: float
    age_std: float

    def to_json_dict(self) -> dict:
        return {
            "numeric_mean": self.numeric_mean,
            "numeric_std": self.numeric_std,
            "degenerate": sorted(self.degenerate),
            "categorical_mode": self.categorical_mode,
            "diagnosis_mode": self.diagnosis_mode.name,
            "age_mean": self.age_mean,
            "age_std": self.age_std,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ImputationStats":
        return cls(
            numeric_mean={k: float(v) for k, v in data["numeric_mean"].items()},
            numeric_std={k: float(v) for k, v in data["numeric_std"].items()},
            degenerate=frozenset(data["degenerate"]),
            categorical_mode=dict(data["categorical_mode"]),
            diagnosis_mode=Diagnosis.parse(data["diagnosis_mode"]),
            age_mean=float(data["age_mean"]),
            age_std=float(data["age_std"]),
        )


def fit_imputation_stats(
    train_visits: Iterable[VisitRecord], schema: FeatureSchema
) -> ImputationStats:
    """Means/stds over observed numerics, modes over observed categoricals.

    Mode ties break by schema category order; the diagnosis mode is taken
    over CN/MCI visit diagnoses (AD never enters the inputs). Features never
    observed in train are flagged degenerate (encode to zero) with a warning.
    """
    visits = list(train_visits)
    num_values: dict[str, list[float]] = {
        f.name: [] for f in schema.features if f.kind == KIND_NUMERIC
    }
    cat_counts: dict[str, Counter] = {
        f.name: Counter() for f in schema.features if f.kind == KIND_CATEGORICAL
    }
    dx_counts: Counter = Counter()
    for v in visits:
        for f in schema.features:
            if f.kind == KIND_DIAGNOSIS:
                if v.diagnosis in (Diagnosis.CN, Diagnosis.MCI):
                    dx_counts[v.diagnosis] += 1
                continue
            fv = v.feature(f.name)
            if not fv.observed or fv.value is None:
                continue
            if f.kind == KIND_NUMERIC:
                num_values[f.name].append(float(fv.value))
            else:
                if fv.value not in f.categories:
                    raise ValueError(f"unknown category {fv.value!r} for feature {f.name!r}")
                cat_counts[f.name][fv.value] += 1

    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    degenerate: set[str] = set()
    for name, vals in num_values.items():
        if not vals:
            warnings.warn(f"feature {name!r} never observed in train; flagged degenerate")
            mean[name], std[name] = 0.0, 0.0
            degenerate.add(name)
            continue
        arr = np.asarray(vals, dtype=np.float64)
        mean[name] = float(arr.mean())
        std[name] = float(arr.std())  # ddof=0
        if std[name] == 0.0:
            degenerate.add(name)

    modes: dict[str, str] = {}
    for name, counts in cat_counts.items():
        cats = schema.by_name[name].categories
        if not counts:
            warnings.warn(f"feature {name!r} never observed in train; mode = first category")
            modes[name] = cats[0]
            continue
        best = max(counts.values())
        modes[name] = next(c for c in cats if counts.get(c, 0) == best)

    if dx_counts:
        top = max(dx_counts.values())
        dx_mode = min(d for d, n in dx_counts.items() if n == top)
    else:
        warnings.warn("no CN/MCI diagnosis observed in train; diagnosis mode = CN")
        dx_mode = Diagnosis.CN

    age_name = schema.age_feature
    if age_name in degenerate:
        age_mean, age_std = 0.0, 1.0
    else:
        age_mean = mean[age_name]
        age_std = std[age_name] if std[age_name] > 0 else 1.0
    return ImputationStats(mean, std, frozenset(degenerate), modes, dx_mode, age_mean, age_std)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _encode_numeric(value: float, name: str, stats: ImputationStats) -> float:
    if name in stats.degenerate:
        return 0.0
    return (value - stats.numeric_mean[name]) / stats.numeric_std[name]


def encode_visit(
    visit: VisitRecord, schema: FeatureSchema, stats: ImputationStats
) -> tuple[np.ndarray, np.ndarray]:
    """Visit -> (feature block, mask block), both float64.

    Missing numerics impute to the train mean (z-score 0), missing
    categoricals to the train mode's one-hot; the mask bit carries the
    original observed flag. Diagnosis encodes ordinally (CN=0, MCI=1).
    """
    block = np.zeros(schema.encoded_width, dtype=np.float64)
    mask = np.zeros(schema.mask_width, dtype=np.float64)
    offset = 0
    for i, f in enumerate(schema.features):
        width = f.encoded_width
        cols = slice(offset, offset + width)
        offset += width
        if f.kind == KIND_DIAGNOSIS:
            dx = visit.diagnosis
            if dx == Diagnosis.AD:
                raise ValueError(f"{visit.subject_id} year {visit.year}: AD visit cannot be encoded as input")
            if dx is None:
                block[cols] = float(stats.diagnosis_mode)
            else:
                block[cols] = float(dx)
                mask[i] = 1.0
            continue
        fv = visit.feature(f.name)
        observed = fv.observed and fv.value is not None
        if f.kind == KIND_NUMERIC:
            value = float(fv.value) if observed else stats.numeric_mean[f.name]
            block[cols] = _encode_numeric(value, f.name, stats)
        else:
            cat = fv.value if observed else stats.categorical_mode[f.name]
            if cat not in f.categories:
                raise ValueError(f"unknown category {cat!r} for feature {f.name!r}")
            block[cols][f.categories.index(cat)] = 1.0
        if observed:
            mask[i] = 1.0
    return block, mask


def imputed_blocks(schema: FeatureSchema, stats: ImputationStats) -> tuple[np.ndarray, np.ndarray]:
    """The all-missing encoding: what a feature looks like when synthesized away."""
    empty = VisitRecord("_", 0, None, {})
    return encode_visit(empty, schema, stats)


@dataclass(frozen=True)
class ModalityCase:
    """Longitudinal modalities kept as time-varying inputs."""

    retained: frozenset[str]

    def __post_init__(self) -> None:
        if not self.retained:
            raise ValueError("modality case must retain at least one modality")
        unknown = self.retained - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")

    @classmethod
    def of(cls, *tags: str) -> "ModalityCase":
        return cls(frozenset(tags))

    @property
    def label(self) -> str:
        order = {m: i for i, m in enumerate(MODALITIES)}
        return "+".join(sorted(self.retained, key=order.__getitem__))


COMPLETE_CASE = ModalityCase(frozenset(MODALITIES))


def apply_modality_case(
    block: np.ndarray,
    mask: np.ndarray,
    schema: FeatureSchema,
    stats: ImputationStats,
    case: ModalityCase,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize missingness for non-retained time-varying modalities.

    Each time-varying feature (non-STATIC, non-diagnosis) whose modality is
    not retained is overwritten with its imputed encoding, mask bit zeroed.
    Idempotent; returns new arrays.
    """
    out_block = np.array(block, dtype=np.float64, copy=True)
    out_mask = np.array(mask, dtype=np.float64, copy=True)
    imp_block, _ = imputed_blocks(schema, stats)
    offset = 0
    for i, f in enumerate(schema.features):
        cols = slice(offset, offset + f.encoded_width)
        offset += f.encoded_width
        if f.kind == KIND_DIAGNOSIS or f.modality == "STATIC":
            continue
        if f.modality in case.retained:
            continue
        out_block[cols] = imp_block[cols]
        out_mask[i] = 0.0
    return out_block, out_mask


def append_horizon(block: np.ndarray, mask: np.ndarray, dt: int) -> np.ndarray:
    """[features | mask | dt]; dt = years from the visit to the target."""
    if dt <= 0:
        raise ValueError(f"prediction horizon must be >= 1 year, got {dt}")
    return np.concatenate([block, mask, [float(dt)]])


# ---------------------------------------------------------------------------
# Token sequences
# ---------------------------------------------------------------------------

@dataclass
class TokenSequence:
    """Padded per-visit tokens for one sample, oldest -> newest.

    positions[i] = now_year - visit_year in {0..3}; ages are raw years
    (normalized inside the model); valid marks real tokens vs padding.
    """

    tokens: np.ndarray  # (max_visits, token_width)
    ages: np.ndarray  # (max_visits,)
    positions: np.ndarray  # (max_visits,) int
    valid: np.ndarray  # (max_visits,) bool

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def build_token_sequence(
    visits: Sequence[VisitRecord],
    now_year: int,
    target_year: int,
    schema: FeatureSchema,
    stats: ImputationStats,
    case: ModalityCase = COMPLETE_CASE,
    max_visits: int = MAX_HISTORY_VISITS,
) -> TokenSequence:
    """Encode a visit history into a padded token sequence.

    Requires 1..max_visits visits, all within [now-3, now]; target_year must
    lie strictly after now_year so every token's dt is >= 1.
    """
    if not visits:
        raise ValueError("at least one history visit is required")
    if len(visits) > max_visits:
        raise ValueError(f"history of {len(visits)} visits exceeds {max_visits}")
    if target_year <= now_year:
        raise ValueError("target year must lie after the reference year")
    ordered = sorted(visits, key=lambda v: v.year)
    width = schema.token_width
    tokens = np.zeros((max_visits, width), dtype=np.float64)
    ages = np.zeros(max_visits, dtype=np.float64)
    positions = np.zeros(max_visits, dtype=np.int64)
    valid = np.zeros(max_visits, dtype=bool)
    for slot, v in enumerate(ordered):
        pos = now_year - v.year
        if not 0 <= pos < max_visits:
            raise ValueError(
                f"visit year {v.year} outside [{now_year - max_visits + 1}, {now_year}]"
            )
        block, mask = encode_visit(v, schema, stats)
        block, mask = apply_modality_case(block, mask, schema, stats, case)
        tokens[slot] = append_horizon(block, mask, target_year - v.year)
        age_fv = v.feature(schema.age_feature)
        ages[slot] = float(age_fv.value) if age_fv.observed and age_fv.value is not None else stats.age_mean
        positions[slot] = pos
        valid[slot] = True
    return TokenSequence(tokens, ages, positions, valid)
