"""Training pipeline: trajectory expansion, visit-drop augmentation,
four-group loss re-weighting, weighted cross-entropy with L2, Adam, and
early stopping on the mean loss over all 15 history scenarios.

Each eligible CN/MCI visit acts as a reference time ("now"); one sample is
built per (now, labeled follow-up year <= 5) pair with the visit history
restricted to the four-year window {now-3..now}.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .cohort import Diagnosis, SubjectHistory, carry_forward_labels
from .features import (
    COMPLETE_CASE,
    MAX_HISTORY_VISITS,
    FeatureSchema,
    ImputationStats,
    ModalityCase,
    apply_modality_case,
    encode_visit,
    imputed_blocks,
)
from .model import ModelConfig, ModelParams, TokenBatch, backward, forward, init_params
from .seeding import child_seed, stream_rng

PROB_FLOOR = 1e-12
HORIZON_YEARS = 5
MAX_PRIOR_YEARS = 3  # history window reaches this many years before now

# slot i of an encoded sample holds the visit at year now - i
OFFSETS = np.arange(MAX_HISTORY_VISITS, dtype=np.int64)


@dataclass(frozen=True)
class TrajectorySample:
    """One (history, target) unit: predict the diagnosis at target_year from
    the visits at history_years, as seen from now_year."""

    subject: SubjectHistory
    now_year: int
    history_years: tuple[int, ...]  # ascending; includes now_year at construction
    target_year: int
    target: Diagnosis
    group: tuple[Diagnosis, bool]  # (stage key, converter at target_year)
    weight: float = 1.0

    @property
    def subject_id(self) -> str:
        return self.subject.subject_id

    @property
    def dt(self) -> int:
        return self.target_year - self.now_year


def _expand(
    subjects: Iterable[SubjectHistory],
    horizon: int,
    max_history: int,
    now_eligible: Callable[[int], bool],
) -> list[TrajectorySample]:
    samples: list[TrajectorySample] = []
    for subject in subjects:
        base = subject.baseline_diagnosis
        if base is None:
            continue
        labels = carry_forward_labels(subject, subject.visits[-1].year + horizon)
        years = subject.visit_years
        for v in subject.visits:
            # only confirmed CN/MCI visits anchor a sample; AD or missing never
            if v.diagnosis not in (Diagnosis.CN, Diagnosis.MCI):
                continue
            if not now_eligible(v.year):
                continue
            history = tuple(y for y in years if v.year - max_history <= y <= v.year)
            for dt in range(1, horizon + 1):
                target = labels.get(v.year + dt)
                if target is None:
                    continue
                group = (base, target > base)
                samples.append(
                    TrajectorySample(subject, v.year, history, v.year + dt, target, group)
                )
    return samples


def expand_dataset(
    subjects: Iterable[SubjectHistory],
    horizon: int = HORIZON_YEARS,
    max_history: int = MAX_PRIOR_YEARS,
) -> list[TrajectorySample]:
    """Every CN/MCI visit becomes a now; one sample per labeled target year."""
    return _expand(subjects, horizon, max_history, lambda year: True)


def expand_dataset_ablated(
    subjects: Iterable[SubjectHistory],
    horizon: int = HORIZON_YEARS,
    max_history: int = MAX_PRIOR_YEARS,
) -> list[TrajectorySample]:
    """Expansion switched off: only the baseline visit serves as a now."""
    return _expand(subjects, horizon, max_history, lambda year: year == 0)


def compute_sample_weights(samples: Sequence[TrajectorySample]) -> list[TrajectorySample]:
    """weight(g, dt) = T / (C * n_cell): every nonempty (group, horizon) cell
    gets equal total weight, and the grand total stays T."""
    counts = Counter((s.group, s.dt) for s in samples)
    if not counts:
        return []
    total = len(samples)
    n_cells = len(counts)
    return [
        replace(s, weight=total / (n_cells * counts[(s.group, s.dt)])) for s in samples
    ]


# ---------------------------------------------------------------------------
# Encoded datasets (precomputed per-visit encodings, slot-aligned samples)
# ---------------------------------------------------------------------------

@dataclass
class EncodedDataset:
    """Vectorized view of a sample list.

    `bm_table` holds one [features | mask] row per distinct (subject, visit);
    sample slot i refers to the visit at year now - i through `row_idx`.
    """

    schema: FeatureSchema
    stats: ImputationStats
    case: ModalityCase
    bm_table: np.ndarray  # (n_rows, block_width)
    row_idx: np.ndarray  # (N, 4) int64, -1 where no visit at that offset
    avail: np.ndarray  # (N, 4) bool
    ages: np.ndarray  # (N, 4) float64, raw years (0 where absent)
    dt: np.ndarray  # (N,) int64
    targets: np.ndarray  # (N,) int64
    weights: np.ndarray  # (N,) float64
    samples: list[TrajectorySample]

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[TrajectorySample],
        schema: FeatureSchema,
        stats: ImputationStats,
        case: ModalityCase = COMPLETE_CASE,
    ) -> "EncodedDataset":
        rows: dict[tuple[str, int], int] = {}
        bm_rows: list[np.ndarray] = []
        age_rows: list[float] = []
        n = len(samples)
        row_idx = np.full((n, MAX_HISTORY_VISITS), -1, dtype=np.int64)
        avail = np.zeros((n, MAX_HISTORY_VISITS), dtype=bool)
        ages = np.zeros((n, MAX_HISTORY_VISITS), dtype=np.float64)
        for i, s in enumerate(samples):
            for year in s.history_years:
                offset = s.now_year - year
                key = (s.subject_id, year)
                if key not in rows:
                    visit = s.subject.visit_at(year)
                    if visit is None:
                        raise ValueError(f"{s.subject_id}: no visit at year {year}")
                    block, mask = encode_visit(visit, schema, stats)
                    if case.retained != COMPLETE_CASE.retained:
                        block, mask = apply_modality_case(block, mask, schema, stats, case)
                    rows[key] = len(bm_rows)
                    bm_rows.append(np.concatenate([block, mask]))
                    age_fv = visit.feature(schema.age_feature)
                    observed = age_fv.observed and age_fv.value is not None
                    age_rows.append(float(age_fv.value) if observed else stats.age_mean)
                r = rows[key]
                row_idx[i, offset] = r
                avail[i, offset] = True
                ages[i, offset] = age_rows[r]
        bm_table = (
            np.stack(bm_rows) if bm_rows else np.zeros((0, schema.block_width))
        )
        return cls(
            schema=schema,
            stats=stats,
            case=case,
            bm_table=bm_table,
            row_idx=row_idx,
            avail=avail,
            ages=ages,
            dt=np.array([s.dt for s in samples], dtype=np.int64),
            targets=np.array([int(s.target) for s in samples], dtype=np.int64),
            weights=np.array([s.weight for s in samples], dtype=np.float64),
            samples=list(samples),
        )

    def with_case(self, case: ModalityCase) -> "EncodedDataset":
        """Same samples, feature table re-synthesized for a modality case."""
        if case.retained == self.case.retained:
            return self
        if self.case.retained != COMPLETE_CASE.retained:
            raise ValueError("modality cases compose only from the complete-case table")
        table = self.bm_table.copy()
        imp_block, _ = imputed_blocks(self.schema, self.stats)
        enc_w = self.schema.encoded_width
        slices = self.schema.column_slices()
        for i, f in enumerate(self.schema.features):
            if f.kind == "diagnosis" or f.modality == "STATIC":
                continue
            if f.modality in case.retained:
                continue
            table[:, slices[f.name]] = imp_block[slices[f.name]]
            table[:, enc_w + i] = 0.0
        return replace(self, bm_table=table, case=case)


def assemble_batch(ds: EncodedDataset, idx: np.ndarray, keep: np.ndarray) -> TokenBatch:
    """Build model inputs for samples `idx`, with per-slot presence `keep`
    (already restricted to available slots)."""
    idx = np.asarray(idx, dtype=np.int64)
    bw = ds.schema.block_width
    n = len(idx)
    tokens = np.zeros((n, MAX_HISTORY_VISITS, bw + 1), dtype=np.float64)
    rows = ds.row_idx[idx]
    tokens[:, :, :bw][keep] = ds.bm_table[rows[keep]]
    dt_col = ds.dt[idx].astype(np.float64)[:, None] + OFFSETS[None, :]
    tokens[:, :, bw] = np.where(keep, dt_col, 0.0)
    ages = np.where(keep, ds.ages[idx], 0.0)
    positions = np.tile(OFFSETS, (n, 1))
    return TokenBatch(tokens=tokens, ages=ages, positions=positions, valid=keep.copy())


def predict_probs(
    params: ModelParams,
    ds: EncodedDataset,
    idx: np.ndarray,
    keep: np.ndarray,
    chunk: int = 2048,
) -> np.ndarray:
    """Eval-mode class probabilities for samples idx under slot mask keep."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.empty((len(idx), 3), dtype=np.float64)
    for lo in range(0, len(idx), chunk):
        hi = min(lo + chunk, len(idx))
        batch = assemble_batch(ds, idx[lo:hi], keep[lo:hi])
        out[lo:hi], _ = forward(params, batch)
    return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_keep_mask(
    avail: np.ndarray,
    rng: np.random.Generator,
    apply_prob: float,
    drop_prob: float,
    drops_now: bool = True,
) -> np.ndarray:
    """Per-sample visit-drop augmentation over slot-availability rows.

    With probability `apply_prob` a sample's present visits are each dropped
    independently with `drop_prob`; all-dropped outcomes are resampled until
    at least one visit survives. Returns the kept-slot mask.
    """
    keep = avail.copy()
    if apply_prob <= 0.0 or drop_prob <= 0.0:
        return keep
    n = avail.shape[0]
    active = rng.random(n) < apply_prob
    for _ in range(10000):
        if not active.any():
            return keep
        rows = np.flatnonzero(active)
        draw = rng.random((len(rows), avail.shape[1])) >= drop_prob  # True = keep
        cand = avail[rows] & draw
        if not drops_now:
            cand[:, 0] = avail[rows, 0]
        ok = cand.any(axis=1)
        keep[rows[ok]] = cand[ok]
        active[rows[ok]] = False
    raise RuntimeError("augmentation resampling failed to produce a nonempty history")


def augment_sequence(
    sample: TrajectorySample,
    rng: np.random.Generator,
    apply_prob: float = 0.8,
    drop_prob: float = 0.5,
    drops_now: bool = True,
) -> TrajectorySample:
    """Single-sample view of the visit-drop augmentation."""
    if not sample.history_years:
        raise ValueError("sample has no history visits")
    avail = np.zeros((1, MAX_HISTORY_VISITS), dtype=bool)
    for y in sample.history_years:
        avail[0, sample.now_year - y] = True
    keep = augment_keep_mask(avail, rng, apply_prob, drop_prob, drops_now)[0]
    kept_years = tuple(
        sorted(sample.now_year - o for o in range(MAX_HISTORY_VISITS) if keep[o])
    )
    return replace(sample, history_years=kept_years)


# ---------------------------------------------------------------------------
# Loss, optimizer
# ---------------------------------------------------------------------------

def weighted_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    params: ModelParams | None = None,
    l2: float = 0.0,
) -> float:
    """Weighted mean cross-entropy, optionally plus l2 * sum(params^2)."""
    n = len(targets)
    p = probs[np.arange(n), targets]
    if np.any(p < PROB_FLOOR):
        warnings.warn("predicted probability underflow; clamping at 1e-12")
        p = np.maximum(p, PROB_FLOOR)
    loss = float((weights * -np.log(p)).sum() / weights.sum())
    if l2 and params is not None:
        loss += l2 * params.l2_sum()
    return loss


def loss_grad_at_probs(
    probs: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Gradient of the weighted-mean cross-entropy at the probabilities."""
    n = len(targets)
    p = np.maximum(probs[np.arange(n), targets], PROB_FLOOR)
    d = np.zeros_like(probs)
    d[np.arange(n), targets] = -(weights / weights.sum()) / p
    return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m=dict(params.zeros_like()), v=dict(params.zeros_like()))


def adam_step(params: ModelParams, grads, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.mark_updated()


# ---------------------------------------------------------------------------
# History scenarios and the validation criterion
# ---------------------------------------------------------------------------

def enumerate_history_scenarios(n_slots: int = MAX_HISTORY_VISITS) -> list[tuple[int, ...]]:
    """All nonempty subsets of the visit offsets {0, -1, .., -(n_slots-1)},
    as ascending offset tuples, in bitmask order (bit j <-> offset -j)."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    out = []
    for mask in range(1, 2 ** n_slots):
        out.append(tuple(sorted(-j for j in range(n_slots) if mask >> j & 1)))
    return out


def scenario_slot_mask(offsets: Sequence[int], n_slots: int = MAX_HISTORY_VISITS) -> np.ndarray:
    mask = np.zeros(n_slots, dtype=bool)
    for o in offsets:
        if not -n_slots < o <= 0:
            raise ValueError(f"offset {o} outside the {n_slots}-slot window")
        mask[-o] = True
    return mask


def scenario_column(offsets: Sequence[int], n_slots: int = MAX_HISTORY_VISITS) -> str:
    bits = "".join("1" if -j in offsets else "0" for j in reversed(range(n_slots)))
    return f"val_{bits}"


def scenario_validation_losses(
    params: ModelParams, val_ds: EncodedDataset
) -> list[tuple[tuple[int, ...], float | None]]:
    """Eval-mode weighted loss per history scenario; None when a scenario
    leaves no sample with a surviving visit."""
    out: list[tuple[tuple[int, ...], float | None]] = []
    for offsets in enumerate_history_scenarios():
        slots = scenario_slot_mask(offsets)
        keep = val_ds.avail & slots
        rows = keep.any(axis=1)
        if not rows.any():
            warnings.warn(f"scenario {offsets} has no evaluable validation samples")
            out.append((offsets, None))
            continue
        idx = np.flatnonzero(rows)
        probs = predict_probs(params, val_ds, idx, keep[idx])
        out.append(
            (offsets, weighted_loss(probs, val_ds.targets[idx], val_ds.weights[idx]))
        )
    return out


def validation_criterion(params: ModelParams, val_ds: EncodedDataset) -> float:
    """Mean of the per-scenario eval losses (the early-stopping criterion)."""
    losses = [l for _, l in scenario_validation_losses(params, val_ds) if l is not None]
    if not losses:
        raise ValueError("no scenario produced an evaluable validation loss")
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 5e-4
    l2_weight: float = 1e-4
    batch_size: int = 32
    augment_prob: float = 0.8
    visit_drop_prob: float = 0.5
    augment_drops_now: bool = True  # False restricts dropping to past visits
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must be in [0, 1]")
        if not 0.0 <= self.visit_drop_prob < 1.0:
            raise ValueError("visit_drop_prob must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size, max_epochs >= 1 and patience >= 0 required")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


def train_on_datasets(
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
) -> tuple[ModelParams, list[dict]]:
    """Epoch loop with fresh augmentation per epoch, Adam updates, and the
    15-scenario early-stopping criterion; returns the best snapshot + log."""
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be nonempty")
    seed = cfg.seed
    params = init_params(model_cfg, child_seed(seed, "init"))
    state = AdamState.for_params(params)
    best_params = params.copy()
    best_criterion = math.inf
    stale_epochs = 0
    log: list[dict] = []
    n = len(train_ds)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = stream_rng(seed, "shuffle", epoch).permutation(n)
        keep_all = augment_keep_mask(
            train_ds.avail,
            stream_rng(seed, "augment", epoch),
            cfg.augment_prob,
            cfg.visit_drop_prob,
            cfg.augment_drops_now,
        )
        dropout_rng = stream_rng(seed, "dropout", epoch)
        ce_sum = 0.0
        w_sum = 0.0
        aborted = False
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            batch = assemble_batch(train_ds, idx, keep_all[idx])
            probs, trace = forward(params, batch, train_mode=True, dropout_rng=dropout_rng)
            targets = train_ds.targets[idx]
            weights = train_ds.weights[idx]
            batch_ce = weighted_loss(probs, targets, weights)
            if not math.isfinite(batch_ce):
                warnings.warn(f"non-finite loss at epoch {epoch}; stopping early")
                aborted = True
                break
            grads = backward(trace, loss_grad_at_probs(probs, targets, weights))
            if cfg.l2_weight:
                for name, p in params.items():
                    grads[name] += 2.0 * cfg.l2_weight * p
            try:
                adam_step(params, grads, state, cfg.learning_rate)
            except FloatingPointError as err:
                warnings.warn(f"{err}; stopping early at epoch {epoch}")
                aborted = True
                break
            ce_sum += batch_ce * weights.sum()
            w_sum += weights.sum()
        if aborted:
            break
        train_loss = float(ce_sum / w_sum + cfg.l2_weight * params.l2_sum())
        per_scenario = scenario_validation_losses(params, val_ds)
        criterion = float(np.mean([l for _, l in per_scenario if l is not None]))
        row: dict = {"epoch": epoch, "train_loss": train_loss}
        for offsets, loss in per_scenario:
            row[scenario_column(offsets)] = loss
        row["val_mean"] = criterion
        log.append(row)
        if criterion < best_criterion:
            best_criterion = criterion
            best_params = params.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs > cfg.patience:
                break
    return best_params, log


def train_model(
    train_samples: Sequence[TrajectorySample],
    val_samples: Sequence[TrajectorySample],
    schema: FeatureSchema,
    stats: ImputationStats,
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
) -> tuple[ModelParams, list[dict]]:
    if not train_samples or not val_samples:
        raise ValueError("training and validation sample lists must be nonempty")
    train_ds = EncodedDataset.from_samples(train_samples, schema, stats)
    val_ds = EncodedDataset.from_samples(val_samples, schema, stats)
    return train_on_datasets(train_ds, val_ds, model_cfg, cfg)


def write_epoch_log(log: Sequence[dict], path) -> None:
    """CSV: epoch, train loss, one column per history scenario, mean criterion."""
    columns = ["epoch", "train_loss"]
    columns += [scenario_column(offs) for offs in enumerate_history_scenarios()]
    columns += ["val_mean"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in log:
            out = {k: ("" if v is None else repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}
            writer.writerow(out)
