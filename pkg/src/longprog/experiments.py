"""Experiment orchestration: config files, repeated stratified splits,
k-fold x seeds training, grid search, ablation toggles, persistence with
resume, and plot-ready CSV reports.

All randomness fans out from one master seed through named streams, so a
re-run with the same config reproduces every artifact byte for byte and
worker count never changes results.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .cohort import (
    Cohort,
    Diagnosis,
    GeneratorConfig,
    SubjectHistory,
    filter_cohort,
    generate_synthetic_cohort,
    kfold_partition,
    read_cohort_jsonl,
    split_subjects,
    write_cohort_jsonl,
    write_summary_csv,
)
from .evaluation import (
    DEFAULT_HISTORY,
    METRIC_NAMES,
    MetricSummary,
    ScenarioEvaluator,
    ScenarioSpec,
)
from .features import COMPLETE_CASE, FeatureSchema, ModalityCase, default_schema, fit_imputation_stats
from .model import ModelConfig, ModelSnapshot, load_checkpoint, save_checkpoint
from .seeding import stream_int, stream_rng
from .training import (
    EncodedDataset,
    TrainingConfig,
    compute_sample_weights,
    expand_dataset,
    expand_dataset_ablated,
    train_on_datasets,
    write_epoch_log,
)

TOOL_VERSION = "0.1.0"
EVAL_GROUPS = (Diagnosis.CN, Diagnosis.MCI)

CELL_COLUMNS = [
    "group", "follow_up_year", "modality_case", "history_start", "frequency",
    "metric", "mean", "stderr", "n_sets", "n_undefined", "n_excluded",
]
REPORT_COLUMNS = [
    "group", "follow_up_year", "modality_case", "history_start", "frequency",
    "metric", "mean", "stderr", "n_replicates", "stderr_axis",
]


def _fmt(x: float | None) -> str:
    return "" if x is None else format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Architecture search axes; 2x2x2x2 = 16 points at the defaults."""

    enabled: bool = False
    hidden_dims: tuple[int, ...] = (128, 256)
    n_heads: tuple[int, ...] = (1, 2)
    n_layers: tuple[int, ...] = (1, 2)
    classifiers: tuple[tuple[int, ...], ...] = ((128, 3), (3,))

    def to_json_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "hidden_dims": list(self.hidden_dims),
            "n_heads": list(self.n_heads),
            "n_layers": list(self.n_layers),
            "classifiers": [list(c) for c in self.classifiers],
        }


def enumerate_grid(grid: GridSpec, base: ModelConfig) -> list[ModelConfig]:
    """All grid candidates in axis-major order (hidden, heads, layers, head)."""
    out = []
    for h, a, l, c in product(grid.hidden_dims, grid.n_heads, grid.n_layers, grid.classifiers):
        out.append(replace(base, hidden_dim=h, n_heads=a, n_layers=l, classifier=tuple(c)))
    return out


@dataclass
class ExperimentConfig:
    schema: FeatureSchema
    out_dir: str
    generator: GeneratorConfig | None = None
    cohort_path: str | None = None
    master_seed: int = 0
    n_splits: int = 10
    test_fraction: float = 0.2
    k_folds: int = 5
    seeds_per_fold: int = 5
    model: ModelConfig | None = None  # filled with schema token width on parse
    grid: GridSpec = field(default_factory=GridSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    history_scenarios: tuple[tuple[int, str], ...] = DEFAULT_HISTORY
    modality_cases: tuple[ModalityCase, ...] = (COMPLETE_CASE,)
    follow_up_years: tuple[int, ...] = (1, 2, 3, 4, 5)
    n_pseudo: int = 20
    no_expansion: bool = False
    no_bias_reduction: bool = False

    def __post_init__(self) -> None:
        if (self.generator is None) == (self.cohort_path is None):
            raise ValueError("configure exactly one of generator / cohort_path")
        if min(self.n_splits, self.k_folds, self.seeds_per_fold, self.n_pseudo) < 1:
            raise ValueError("n_splits, k_folds, seeds_per_fold, n_pseudo must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if not self.follow_up_years or min(self.follow_up_years) < 1:
            raise ValueError("follow_up_years must be positive")
        if self.model is None:
            self.model = ModelConfig(token_width=self.schema.token_width)
        if self.model.token_width != self.schema.token_width:
            raise ValueError("model token width disagrees with the schema")

    def scenario_specs(self) -> list[ScenarioSpec]:
        return [
            ScenarioSpec(start, freq, case)
            for case in self.modality_cases
            for (start, freq) in self.history_scenarios
        ]

    def to_json_dict(self) -> dict:
        return {
            "schema": self.schema.to_json_dict(),
            "generator": None if self.generator is None else _generator_to_json(self.generator),
            "cohort_path": self.cohort_path,
            "master_seed": self.master_seed,
            "n_splits": self.n_splits,
            "test_fraction": self.test_fraction,
            "k_folds": self.k_folds,
            "seeds_per_fold": self.seeds_per_fold,
            "model": self.model.to_json_dict(),
            "grid": self.grid.to_json_dict(),
            "training": asdict(self.training),
            "history_scenarios": [[s, f] for s, f in self.history_scenarios],
            "modality_cases": [sorted(c.retained) for c in self.modality_cases],
            "follow_up_years": list(self.follow_up_years),
            "n_pseudo": self.n_pseudo,
            "no_expansion": self.no_expansion,
            "no_bias_reduction": self.no_bias_reduction,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        schema_part = data.get("schema", "default")
        schema = default_schema() if schema_part == "default" else FeatureSchema.from_json_dict(schema_part)
        generator = None
        if data.get("generator") is not None:
            generator = _generator_from_json(data["generator"])
        model_part = dict(data.get("model", {}))
        model_part.pop("token_width", None)
        if "classifier" in model_part:
            model_part["classifier"] = tuple(model_part["classifier"])
        model = ModelConfig(token_width=schema.token_width, **model_part)
        grid_part = dict(data.get("grid", {}))
        if "classifiers" in grid_part:
            grid_part["classifiers"] = tuple(tuple(c) for c in grid_part["classifiers"])
        for k in ("hidden_dims", "n_heads", "n_layers"):
            if k in grid_part:
                grid_part[k] = tuple(grid_part[k])
        ev = data.get("evaluation", {})
        history = tuple(
            (int(s), str(f)) for s, f in ev.get("history_scenarios", [list(x) for x in DEFAULT_HISTORY])
        )
        cases = tuple(
            ModalityCase(frozenset(tags)) for tags in ev.get("modality_cases", [sorted(COMPLETE_CASE.retained)])
        )
        ab = data.get("ablations", {})
        return cls(
            schema=schema,
            out_dir=data["out_dir"],
            generator=generator,
            cohort_path=data.get("cohort_path"),
            master_seed=int(data.get("master_seed", 0)),
            n_splits=int(data.get("n_splits", 10)),
            test_fraction=float(data.get("test_fraction", 0.2)),
            k_folds=int(data.get("k_folds", 5)),
            seeds_per_fold=int(data.get("seeds_per_fold", 5)),
            model=model,
            grid=GridSpec(**grid_part),
            training=TrainingConfig(**data.get("training", {})),
            history_scenarios=history,
            modality_cases=cases,
            follow_up_years=tuple(int(y) for y in ev.get("follow_up_years", (1, 2, 3, 4, 5))),
            n_pseudo=int(ev.get("n_pseudo", 20)),
            no_expansion=bool(ab.get("no_expansion", False)),
            no_bias_reduction=bool(ab.get("no_bias_reduction", False)),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_config_data(path))


def _generator_to_json(g: GeneratorConfig) -> dict:
    data = asdict(g)
    data["drift_features"] = list(g.drift_features)
    data["conversion_hazard"] = dict(g.conversion_hazard)
    data["missingness"] = dict(g.missingness)
    if g.visit_skip_by_stage is not None:
        data["visit_skip_by_stage"] = dict(g.visit_skip_by_stage)
    return data


def _generator_from_json(data: dict) -> GeneratorConfig:
    data = dict(data)
    if "drift_features" in data:
        data["drift_features"] = tuple(data["drift_features"])
    return GeneratorConfig(**data)


def load_config_data(path) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    if path.suffix == ".json":
        with open(path) as fh:
            return json.load(fh)
    raise ValueError(f"unsupported config format {path.suffix!r} (use .json or .toml)")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    out_dir: str
    n_splits: int
    completed_splits: list[int]
    checkpoints: dict[str, list[str]]  # split label -> checkpoint prefixes
    chosen_models: dict[str, dict]  # split label -> model config
    reports: list[str]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


# ---------------------------------------------------------------------------
# Cohort preparation
# ---------------------------------------------------------------------------

def prepare_cohort(cfg: ExperimentConfig, out_dir: Path) -> Cohort:
    """Generate or load the cohort, persist it plus exclusion/summary tables,
    and return the filtered version used everywhere downstream."""
    cohort_file = out_dir / "cohort.jsonl"
    if cohort_file.exists():
        subjects = read_cohort_jsonl(cohort_file)
    elif cfg.generator is not None:
        subjects = generate_synthetic_cohort(cfg.generator, cfg.schema)
        write_cohort_jsonl(subjects, cohort_file)
    else:
        subjects = read_cohort_jsonl(cfg.cohort_path)
        write_cohort_jsonl(subjects, cohort_file)
    cohort = filter_cohort(subjects)
    with open(out_dir / "exclusions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rule", "n_excluded"])
        for rule, n in cohort.exclusions.items():
            writer.writerow([rule, n])
    write_summary_csv(
        cohort.subjects, max(cfg.follow_up_years, default=5), out_dir / "cohort_summary.csv"
    )
    return cohort


# ---------------------------------------------------------------------------
# Per-fold training
# ---------------------------------------------------------------------------

def _fold_membership(train_ids: list[str], folds: list[list[str]], fold: int) -> tuple[list[str], list[str]]:
    if len(folds) == 1:  # degenerate single fold: validate on the train set
        return list(train_ids), list(folds[0])
    val = folds[fold]
    val_set = set(val)
    return [sid for sid in train_ids if sid not in val_set], list(val)


def _build_fold_datasets(
    cfg: ExperimentConfig,
    by_id: dict[str, SubjectHistory],
    train_ids: list[str],
    folds: list[list[str]],
    fold: int,
):
    """(train_ds, val_ds, stats) for one fold, honoring the expansion ablation."""
    fold_train, fold_val = _fold_membership(train_ids, folds, fold)
    train_subjects = [by_id[s] for s in fold_train]
    val_subjects = [by_id[s] for s in fold_val]
    visits = [v for s in train_subjects for v in s.visits]
    stats = fit_imputation_stats(visits, cfg.schema)
    expander = expand_dataset_ablated if cfg.no_expansion else expand_dataset
    train_samples = compute_sample_weights(expander(train_subjects))
    val_samples = compute_sample_weights(expand_dataset(val_subjects))
    train_ds = EncodedDataset.from_samples(train_samples, cfg.schema, stats)
    val_ds = EncodedDataset.from_samples(val_samples, cfg.schema, stats)
    return train_ds, val_ds, stats


def _train_one(
    cfg: ExperimentConfig,
    split: int,
    fold: int,
    seed_index: int,
    model_cfg: ModelConfig,
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    stats,
    ckpt_prefix: Path,
    log_path: Path,
) -> ModelSnapshot:
    seed = stream_int(cfg.master_seed, "train", split, fold, seed_index)
    t_cfg = replace(cfg.training, seed=seed)
    m_cfg = replace(model_cfg, age_mean=stats.age_mean, age_std=stats.age_std)
    params, log = train_on_datasets(train_ds, val_ds, m_cfg, t_cfg)
    write_epoch_log(log, log_path)
    snapshot = ModelSnapshot(
        params=params,
        schema_hash=cfg.schema.schema_hash,
        seed=seed,
        stats=stats.to_json_dict(),
        extra={"split": split, "fold": fold, "seed_index": seed_index},
    )
    save_checkpoint(snapshot, ckpt_prefix)
    return snapshot


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LONGPROG_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def run_grid_search(
    cfg: ExperimentConfig,
    by_id: dict[str, SubjectHistory],
    train_ids: list[str],
    folds: list[list[str]],
    split: int,
    trainer: Callable | None = None,
) -> tuple[ModelConfig, list[dict]]:
    """Train every grid candidate on each fold (one seed per fold) and pick
    the config with the lowest mean validation criterion; failed candidates
    are excluded with a diagnostic."""
    trainer = trainer or train_on_datasets
    candidates = enumerate_grid(cfg.grid, cfg.model)
    fold_data = [
        _build_fold_datasets(cfg, by_id, train_ids, folds, f) for f in range(len(folds))
    ]
    table: list[dict] = []
    best_idx, best_score = None, np.inf
    for gi, candidate in enumerate(candidates):
        criteria: list[float] = []
        failed = False
        for f, (train_ds, val_ds, stats) in enumerate(fold_data):
            seed = stream_int(cfg.master_seed, "grid", split, gi, f)
            t_cfg = replace(cfg.training, seed=seed)
            m_cfg = replace(candidate, age_mean=stats.age_mean, age_std=stats.age_std)
            try:
                _, log = trainer(train_ds, val_ds, m_cfg, t_cfg)
                criteria.append(min(row["val_mean"] for row in log))
            except Exception as err:  # noqa: BLE001 - a bad grid point must not kill the search
                warnings.warn(f"grid point {candidate} failed on fold {f}: {err}")
                failed = True
                break
        score = float(np.mean(criteria)) if criteria and not failed else None
        table.append({"config": candidate.to_json_dict(), "criterion": score})
        if score is not None and score < best_score:
            best_idx, best_score = gi, score
    if best_idx is None:
        raise RuntimeError("every grid point failed")
    return candidates[best_idx], table


# ---------------------------------------------------------------------------
# Evaluation cells -> CSV rows
# ---------------------------------------------------------------------------

def _cell_rows_bias_reduced(
    cfg: ExperimentConfig, evaluator: ScenarioEvaluator, split: int
) -> list[dict]:
    rows = []
    for ci, case in enumerate(cfg.modality_cases):
        for hi, (start, freq) in enumerate(cfg.history_scenarios):
            spec = ScenarioSpec(start, freq, case)
            for group in EVAL_GROUPS:
                for year in cfg.follow_up_years:
                    rng = stream_rng(cfg.master_seed, "pseudo", split, ci, hi, int(group), year)
                    base = {
                        "group": group.name,
                        "follow_up_year": year,
                        "modality_case": case.label,
                        "history_start": start,
                        "frequency": freq,
                    }
                    try:
                        summaries, excluded = evaluator.evaluate_cell(
                            group, year, spec, cfg.n_pseudo, rng
                        )
                    except ValueError as err:
                        warnings.warn(str(err))
                        for metric in METRIC_NAMES:
                            rows.append({**base, "metric": metric, "mean": "", "stderr": "",
                                         "n_sets": 0, "n_undefined": cfg.n_pseudo, "n_excluded": 0})
                        continue
                    for metric in METRIC_NAMES:
                        s = summaries[metric]
                        rows.append({**base, "metric": metric, "mean": _fmt(s.mean),
                                     "stderr": _fmt(s.stderr), "n_sets": s.n,
                                     "n_undefined": s.n_undefined, "n_excluded": excluded})
    return rows


def _cell_rows_no_bias(
    cfg: ExperimentConfig, evaluator: ScenarioEvaluator, split: int
) -> list[dict]:
    rows = []
    for case in cfg.modality_cases:
        for start, freq in cfg.history_scenarios:
            spec = ScenarioSpec(start, freq, case)
            for group in EVAL_GROUPS:
                for year in cfg.follow_up_years:
                    base = {
                        "group": group.name,
                        "follow_up_year": year,
                        "modality_case": case.label,
                        "history_start": start,
                        "frequency": freq,
                    }
                    try:
                        metrics = evaluator.evaluate_cell_without_bias_reduction(group, year, spec)
                    except ValueError as err:
                        warnings.warn(str(err))
                        metrics = {m: None for m in METRIC_NAMES}
                    for metric in METRIC_NAMES:
                        v = metrics[metric]
                        rows.append({**base, "metric": metric, "mean": _fmt(v),
                                     "stderr": _fmt(0.0) if v is not None else "",
                                     "n_sets": 1 if v is not None else 0,
                                     "n_undefined": 0 if v is not None else 1,
                                     "n_excluded": 0})
    return rows


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _evaluate_split(
    cfg: ExperimentConfig,
    split: int,
    snapshots: list[ModelSnapshot],
    test_subjects: list[SubjectHistory],
    no_bias: bool,
) -> list[dict]:
    evaluator = ScenarioEvaluator(
        snapshots, cfg.schema, test_subjects, horizon=max(cfg.follow_up_years)
    )
    if no_bias:
        return _cell_rows_no_bias(cfg, evaluator, split)
    return _cell_rows_bias_reduced(cfg, evaluator, split)


# ---------------------------------------------------------------------------
# The full experiment
# ---------------------------------------------------------------------------

def prepare_split(cfg: ExperimentConfig, out: Path, cohort: Cohort, split: int) -> dict:
    """split.json for one split index: ids, folds, and the model choice
    (grid-searched when enabled). Loaded as-is if it already exists."""
    split_dir = out / "splits" / f"split{split:02d}"
    split_dir.mkdir(parents=True, exist_ok=True)
    split_file = split_dir / "split.json"
    if split_file.exists():
        with open(split_file) as fh:
            return json.load(fh)
    by_id = cohort.by_id()
    train_ids, test_ids = split_subjects(
        cohort.subjects, cfg.test_fraction, stream_int(cfg.master_seed, "split", split)
    )
    strata = {sid: int(by_id[sid].baseline_diagnosis) for sid in train_ids}
    if cfg.k_folds == 1:
        folds = [list(train_ids)]
    else:
        folds = kfold_partition(
            train_ids, cfg.k_folds, strata, stream_int(cfg.master_seed, "folds", split)
        )
    if cfg.grid.enabled:
        model_cfg, grid_table = run_grid_search(cfg, by_id, train_ids, folds, split)
    else:
        model_cfg, grid_table = cfg.model, []
    split_info = {
        "train_ids": train_ids,
        "test_ids": test_ids,
        "folds": folds,
        "model": model_cfg.to_json_dict(),
        "grid_table": grid_table,
    }
    with open(split_file, "w") as fh:
        json.dump(split_info, fh, indent=1, sort_keys=True)
    return split_info


def train_split(
    cfg: ExperimentConfig,
    out: Path,
    by_id: dict[str, SubjectHistory],
    split_info: dict,
    split: int,
) -> tuple[list[ModelSnapshot], list[str]]:
    """Train (or reload) the fold x seed ensemble of one split; returns the
    snapshots plus their checkpoint prefixes. Already-persisted checkpoints
    are never retrained."""
    split_dir = out / "splits" / f"split{split:02d}"
    (split_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (split_dir / "logs").mkdir(exist_ok=True)
    train_ids = split_info["train_ids"]
    folds = split_info["folds"]
    model_cfg = ModelConfig.from_json_dict(split_info["model"])

    jobs = [(f, s) for f in range(len(folds)) for s in range(cfg.seeds_per_fold)]
    prefixes = {job: split_dir / "checkpoints" / f"fold{job[0]}_seed{job[1]}" for job in jobs}
    to_train = [j for j in jobs if not prefixes[j].with_suffix(".json").exists()]
    fold_cache: dict[int, tuple] = {}
    for fold, _ in to_train:
        if fold not in fold_cache:
            fold_cache[fold] = _build_fold_datasets(cfg, by_id, train_ids, folds, fold)

    def _job(job: tuple[int, int]) -> ModelSnapshot:
        fold, seed_index = job
        train_ds, val_ds, stats = fold_cache[fold]
        return _train_one(
            cfg, split, fold, seed_index, model_cfg, train_ds, val_ds, stats,
            prefixes[job], split_dir / "logs" / f"fold{fold}_seed{seed_index}.csv",
        )

    trained: dict[tuple[int, int], ModelSnapshot] = {}
    workers = _worker_count()
    if workers > 1 and len(to_train) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for job, snap in zip(to_train, pool.map(_job, to_train)):
                trained[job] = snap
    else:
        for job in to_train:
            trained[job] = _job(job)
    snapshots = [trained.get(job) or load_checkpoint(prefixes[job]) for job in jobs]
    return snapshots, [str(prefixes[j]) for j in jobs]


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = prepare_cohort(cfg, out)
    by_id = cohort.by_id()
    no_bias = cfg.no_bias_reduction
    cells_name = "metrics_cells_nobias.csv" if no_bias else "metrics_cells.csv"

    manifest = RunManifest(
        config_hash=cfg.config_hash,
        tool_version=TOOL_VERSION,
        out_dir=str(out),
        n_splits=cfg.n_splits,
        completed_splits=[],
        checkpoints={},
        chosen_models={},
        reports=[],
    )
    for split in range(cfg.n_splits):
        label = f"split{split:02d}"
        split_info = prepare_split(cfg, out, cohort, split)
        manifest.chosen_models[label] = dict(split_info["model"])
        snapshots, prefixes = train_split(cfg, out, by_id, split_info, split)
        manifest.checkpoints[label] = prefixes

        cells_file = out / "splits" / label / cells_name
        if not cells_file.exists():
            test_subjects = [by_id[sid] for sid in split_info["test_ids"]]
            rows = _evaluate_split(cfg, split, snapshots, test_subjects, no_bias)
            _write_rows(cells_file, CELL_COLUMNS, rows)
        manifest.completed_splits.append(split)

    reports_dir = "reports_nobias" if no_bias else "reports"
    manifest.reports = emit_report(out, cells_name=cells_name, reports_name=reports_dir)
    manifest.save(out / ("manifest_nobias.json" if no_bias else "manifest.json"))
    return manifest


def evaluate_run(cfg: ExperimentConfig, run_dir, no_bias: bool | None = None) -> list[str]:
    """Re-run evaluation and reports over an existing run's checkpoints,
    optionally switching off the temporal-bias reduction."""
    run_dir = Path(run_dir)
    if no_bias is None:
        no_bias = cfg.no_bias_reduction
    cells_name = "metrics_cells_nobias.csv" if no_bias else "metrics_cells.csv"
    subjects = read_cohort_jsonl(run_dir / "cohort.jsonl")
    cohort = filter_cohort(subjects)
    by_id = cohort.by_id()
    split_dirs = sorted((run_dir / "splits").glob("split*"))
    if not split_dirs:
        raise FileNotFoundError(f"{run_dir} has no trained splits")
    for split_dir in split_dirs:
        split = int(split_dir.name.replace("split", ""))
        with open(split_dir / "split.json") as fh:
            split_info = json.load(fh)
        snapshots = []
        for prefix in sorted((split_dir / "checkpoints").glob("*.json")):
            snapshots.append(load_checkpoint(prefix.with_suffix("")))
        if not snapshots:
            raise FileNotFoundError(f"{split_dir} has no checkpoints")
        test_subjects = [by_id[sid] for sid in split_info["test_ids"]]
        rows = _evaluate_split(cfg, split, snapshots, test_subjects, no_bias)
        _write_rows(split_dir / cells_name, CELL_COLUMNS, rows)
    reports_dir = "reports_nobias" if no_bias else "reports"
    return emit_report(run_dir, cells_name=cells_name, reports_name=reports_dir)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _read_cells(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate_cells(run_dir: Path, cells_name: str = "metrics_cells.csv") -> list[dict]:
    """Merge per-split cell tables into mean +- stderr rows; the stderr axis
    is splits when more than one split exists, else pseudo sets."""
    split_files = sorted((run_dir / "splits").glob(f"split*/{cells_name}"))
    if not split_files:
        raise FileNotFoundError(f"no {cells_name} under {run_dir}/splits")
    per_key: dict[tuple, list[dict]] = {}
    for path in split_files:
        for row in _read_cells(path):
            key = (
                row["group"], int(row["follow_up_year"]), row["modality_case"],
                int(row["history_start"]), row["frequency"], row["metric"],
            )
            per_key.setdefault(key, []).append(row)
    multi_split = len(split_files) > 1
    out_rows = []
    for key in sorted(per_key):
        group, year, case, start, freq, metric = key
        rows = per_key[key]
        means = [float(r["mean"]) for r in rows if r["mean"] != ""]
        if multi_split:
            axis = "splits"
            if means:
                arr = np.asarray(means)
                mean = arr.mean()
                stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
                n = len(arr)
            else:
                mean, stderr, n = None, None, 0
        else:
            axis = "pseudo_sets"
            row = rows[0]
            mean = float(row["mean"]) if row["mean"] != "" else None
            stderr = float(row["stderr"]) if row["stderr"] != "" else None
            n = int(row["n_sets"])
        out_rows.append({
            "group": group, "follow_up_year": year, "modality_case": case,
            "history_start": start, "frequency": freq, "metric": metric,
            "mean": _fmt(mean), "stderr": _fmt(stderr),
            "n_replicates": n, "stderr_axis": axis,
        })
    return out_rows


def _delta_rows(metric_rows: list[dict]) -> list[dict]:
    """AUROC deltas of each scenario against the now-only baseline."""
    auroc_rows = [r for r in metric_rows if r["metric"] == "auroc" and r["mean"] != ""]
    baseline: dict[tuple, float] = {}
    for r in auroc_rows:
        if int(r["history_start"]) == 0 and r["frequency"] == "annual":
            baseline[(r["group"], r["modality_case"], int(r["follow_up_year"]))] = float(r["mean"])
    out = []
    scenarios = sorted({(r["group"], r["modality_case"], int(r["history_start"]), r["frequency"]) for r in auroc_rows})
    for group, case, start, freq in scenarios:
        deltas = []
        for r in sorted(auroc_rows, key=lambda r: int(r["follow_up_year"])):
            if (r["group"], r["modality_case"], int(r["history_start"]), r["frequency"]) != (group, case, start, freq):
                continue
            year = int(r["follow_up_year"])
            base = baseline.get((group, case, year))
            if base is None:
                continue
            delta = float(r["mean"]) - base
            deltas.append(delta)
            out.append({
                "group": group, "modality_case": case, "history_start": start,
                "frequency": freq, "follow_up_year": year,
                "scenario_auroc": _fmt(float(r["mean"])), "baseline_auroc": _fmt(base),
                "delta_auroc": _fmt(delta),
            })
        if deltas:
            out.append({
                "group": group, "modality_case": case, "history_start": start,
                "frequency": freq, "follow_up_year": "mean",
                "scenario_auroc": "", "baseline_auroc": "",
                "delta_auroc": _fmt(float(np.mean(deltas))),
            })
    return out


def _summary_text(metric_rows: list[dict], delta_rows: list[dict]) -> str:
    lines = ["metric means per (group, modality case, history scenario), averaged over follow-up years", ""]
    auroc_rows = [r for r in metric_rows if r["metric"] == "auroc" and r["mean"] != ""]
    keys = sorted({(r["group"], r["modality_case"], int(r["history_start"]), r["frequency"]) for r in auroc_rows})
    for group, case, start, freq in keys:
        vals = [float(r["mean"]) for r in auroc_rows
                if (r["group"], r["modality_case"], int(r["history_start"]), r["frequency"]) == (group, case, start, freq)]
        scen = "0" if start == 0 and freq == "annual" else f"{start} ({'Annu.' if freq == 'annual' else 'Bien.'})"
        delta = next((r["delta_auroc"] for r in delta_rows
                      if r["follow_up_year"] == "mean"
                      and (r["group"], r["modality_case"], int(r["history_start"]), r["frequency"]) == (group, case, start, freq)), "")
        extra = f"  delta vs now-only = {float(delta):+.4f}" if delta != "" else ""
        lines.append(f"task {group}->{'MCI' if group == 'CN' else 'AD'}  case {case:<24} history {scen:<12} "
                     f"mean AUROC = {np.mean(vals):.4f}{extra}")
    return "\n".join(lines) + "\n"


def emit_report(run_dir, cells_name: str = "metrics_cells.csv", reports_name: str = "reports") -> list[str]:
    """Aggregate split cell tables into metrics.csv, delta_auroc.csv, and a
    human-readable summary."""
    run_dir = Path(run_dir)
    reports = run_dir / reports_name
    reports.mkdir(parents=True, exist_ok=True)
    metric_rows = aggregate_cells(run_dir, cells_name)
    metrics_path = reports / "metrics.csv"
    _write_rows(metrics_path, REPORT_COLUMNS, metric_rows)
    delta = _delta_rows(metric_rows)
    delta_path = reports / "delta_auroc.csv"
    _write_rows(delta_path, ["group", "modality_case", "history_start", "frequency",
                             "follow_up_year", "scenario_auroc", "baseline_auroc", "delta_auroc"], delta)
    summary_path = reports / "summary.txt"
    with open(summary_path, "w") as fh:
        fh.write(_summary_text(metric_rows, delta))
    return [str(metrics_path), str(delta_path), str(summary_path)]
