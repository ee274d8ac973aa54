"""Prognosis of cognitive decline from longitudinal visit histories.

A horizon-conditioned transformer classifier over tokenized clinical visits,
with dataset-expansion training, visit-dropout augmentation, group/horizon
loss re-weighting, temporal-bias-reduced evaluation, and a reproducible
experiment harness.
"""

from .cohort import (
    Cohort,
    Diagnosis,
    FeatureValue,
    GeneratorConfig,
    SubjectHistory,
    VisitRecord,
    carry_forward_labels,
    filter_cohort,
    generate_synthetic_cohort,
    kfold_partition,
    read_cohort_jsonl,
    split_subjects,
    write_cohort_jsonl,
)
from .evaluation import (
    MetricSummary,
    ScenarioEvaluator,
    ScenarioSpec,
    auroc,
    aupr,
    build_pseudo_test_set,
    compute_metrics,
    ece,
    ensemble_predict,
    evaluate_scenario,
    threshold_metrics,
)
from .experiments import (
    ExperimentConfig,
    GridSpec,
    RunManifest,
    emit_report,
    enumerate_grid,
    evaluate_run,
    run_experiment,
    run_grid_search,
)
from .features import (
    COMPLETE_CASE,
    FeatureSchema,
    FeatureSpec,
    ImputationStats,
    ModalityCase,
    apply_modality_case,
    build_token_sequence,
    default_schema,
    encode_visit,
    fit_imputation_stats,
)
from .model import (
    ModelConfig,
    ModelParams,
    ModelSnapshot,
    TokenBatch,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    EncodedDataset,
    TrainingConfig,
    TrajectorySample,
    augment_sequence,
    compute_sample_weights,
    enumerate_history_scenarios,
    expand_dataset,
    train_model,
    train_on_datasets,
    weighted_loss,
)

__version__ = "0.1.0"
