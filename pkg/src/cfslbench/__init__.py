"""Benchmark harness for continual few-shot learning on image classes.

Parameterized task streams (support-set count, class-change interval,
n-way, k-shot), two baseline learners (a fine-tunable convnet and a
frozen-embedding prototype classifier), an optional replay buffer, and an
experiment harness with seeded statistics reporting.
"""
from .datasets import (
    ClassDataset,
    ClassRecord,
    DatasetError,
    Sample,
    SplitError,
    SplitSpec,
    export_image_folder,
    load_image_folder,
    preprocess_batch,
    split_background_eval,
    synth_generate,
)
from .episodes import (
    CLASSIFICATION,
    INSTANCE,
    ConfigError,
    ExperimentConfig,
    PresetError,
    SamplingError,
    SupportSet,
    Task,
    TaskItem,
    ValidationReport,
    derive_counts,
    read_task_manifest,
    sample_task,
    task_stream,
    validate_task,
    write_task_manifest,
)
from .gradcheck import GradCheckReport, finite_difference_check
from .harness import (
    EnsembleError,
    HarnessError,
    SweepSpec,
    ensemble_evaluate,
    run_experiment,
    run_task,
    sweep,
    task_accuracy,
)
from .models import (
    CONVNET,
    PROTONET,
    Checkpoint,
    CheckpointError,
    ConvNetLearner,
    DivergenceError,
    InferenceError,
    LearnerSpec,
    LifecycleError,
    PretrainConfig,
    PretrainLog,
    PrototypeStore,
    ProtoNetLearner,
    learner_from_snapshot,
    load_checkpoint,
    make_learner,
    save_checkpoint,
)
from .presets import (
    EXPERIMENT_PRESETS,
    FINE_TUNE_STEPS,
    learner_preset,
    preset,
    preset_names,
    replay_preset,
)
from .replay import (
    ReplayBuffer,
    ReplayConfig,
    ReplayError,
    ReplayNotApplicableError,
    adapt_with_replay,
    ensure_replay_applicable,
)
from .reports import (
    ReportError,
    ReportVersionError,
    RunReport,
    SeedOutcome,
    comparison_table,
    format_summary_line,
    load_leaderboard,
    load_report,
    make_report,
    make_seed_outcome,
    overall_statistics,
    persist_report,
    render_bar_chart,
    seed_statistics,
    summary_rows,
    write_leaderboard,
    write_summary_json,
)
from .seeding import derive_rng, derive_seed

__version__ = "0.1.0"
