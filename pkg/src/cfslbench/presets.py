"""Named experiment configurations and their tuned hyperparameter defaults.

Three families: replication rows (ten rows over five parameterizations,
reported over 3 seeds), scaling rows (baselines plus wide/deep regimes with
one exemplar per class per set, 5 seeds), and the instance test (single-class
streams with twenty exemplars, 5 seeds). Convnet-with-replay defaults carry
the per-experiment buffer size b, replay draw count k, and fine-tune step
budgets; the instance rows reuse the baseline2 model settings.
"""
from __future__ import annotations

from .episodes import CLASSIFICATION, INSTANCE, ExperimentConfig, PresetError
from .models import LearnerSpec
from .replay import ReplayConfig

_SCALING_SEEDS = (0, 1, 2, 3, 4)
_REPLICATION_SEEDS = (0, 1, 2)

_REPLICATION_ROWS = [
    # (nss, cci, n_way, k_shot) for each of the five replicated parameterizations
    (4, 2, 5, 2),
    (8, 2, 5, 2),
    (3, 1, 5, 2),
    (5, 1, 5, 2),
    (10, 1, 5, 2),
]

EXPERIMENT_PRESETS: dict[str, ExperimentConfig] = {
    "baseline1": ExperimentConfig(4, 2, 5, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "baseline2": ExperimentConfig(8, 2, 5, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "wide1": ExperimentConfig(4, 2, 10, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "wide2": ExperimentConfig(4, 2, 100, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "deep1": ExperimentConfig(20, 2, 2, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "deep2": ExperimentConfig(80, 2, 5, 1, CLASSIFICATION, seeds=_SCALING_SEEDS),
    "instance_exp1": ExperimentConfig(1, 1, 1, 20, INSTANCE, seeds=_SCALING_SEEDS),
    "instance_exp2": ExperimentConfig(2, 2, 1, 10, INSTANCE, seeds=_SCALING_SEEDS),
    "instance_exp3": ExperimentConfig(4, 4, 1, 5, INSTANCE, seeds=_SCALING_SEEDS),
    "instance_exp4": ExperimentConfig(10, 10, 1, 2, INSTANCE, seeds=_SCALING_SEEDS),
    "instance_exp5": ExperimentConfig(20, 20, 1, 1, INSTANCE, seeds=_SCALING_SEEDS),
}
for _i, (_nss, _cci, _way, _k) in enumerate(_REPLICATION_ROWS * 2, start=1):
    EXPERIMENT_PRESETS[f"replication{_i}"] = ExperimentConfig(
        _nss, _cci, _way, _k, CLASSIFICATION, seeds=_REPLICATION_SEEDS
    )

# Tuned convnet-with-replay settings per experiment: (filters, stages, lr, b, k).
_TUNED_CONVNET = {
    "baseline1": (512, 3, 0.01, 2, 10),
    "baseline2": (128, 3, 0.01, 4, 10),
    "wide1": (256, 3, 0.01, 2, 20),
    "wide2": (128, 2, 0.01, 2, 50),
    "deep1": (256, 3, 0.01, 5, 10),
    "deep2": (256, 3, 0.01, 5, 10),
    # Instance rows reuse the baseline2 model and buffer settings.
    "instance_exp1": (128, 3, 0.01, 4, 10),
    "instance_exp2": (128, 3, 0.01, 4, 10),
    "instance_exp3": (128, 3, 0.01, 4, 10),
    "instance_exp4": (128, 3, 0.01, 4, 10),
    "instance_exp5": (128, 3, 0.01, 4, 10),
}

# Fine-tune step budgets per experiment; None marks replay-not-applicable.
FINE_TUNE_STEPS: dict[str, int | None] = {
    "baseline1": 120,
    "baseline2": 60,
    "wide1": 30,
    "wide2": 30,
    "deep1": 5,
    "deep2": 5,
    "instance_exp1": None,
    "instance_exp2": 120,
    "instance_exp3": 120,
    "instance_exp4": 60,
    "instance_exp5": 30,
}

_DEFAULT_FINE_TUNE_STEPS = 60


def preset_names() -> tuple[str, ...]:
    return tuple(EXPERIMENT_PRESETS)


def preset(name: str) -> ExperimentConfig:
    """Look up a named experiment configuration."""
    try:
        return EXPERIMENT_PRESETS[name]
    except KeyError:
        raise PresetError(
            f"unknown preset {name!r}; known presets: {', '.join(sorted(EXPERIMENT_PRESETS))}"
        ) from None


def learner_preset(name: str, kind: str = "convnet") -> LearnerSpec:
    """Tuned learner settings for a named experiment.

    Convnet specs carry the tuned filters/stages/lr and the experiment's
    fine-tune step budget where the tables define them; rows without tuned
    values (the replication rows) fall back to shared defaults. Protonet
    specs are shared across experiments since only the embedding model is
    involved.
    """
    if name not in EXPERIMENT_PRESETS:
        raise PresetError(f"unknown preset {name!r}")
    if kind == "protonet":
        return LearnerSpec(kind="protonet", filters=64, stages=3, output_dim=64)
    if kind != "convnet":
        raise PresetError(f"unknown learner kind {kind!r}")
    if name not in _TUNED_CONVNET:
        return LearnerSpec(kind="convnet", fine_tune_steps=_DEFAULT_FINE_TUNE_STEPS)
    filters, stages, lr, _b, _k = _TUNED_CONVNET[name]
    steps = FINE_TUNE_STEPS[name]
    return LearnerSpec(
        kind="convnet",
        filters=filters,
        stages=stages,
        lr=lr,
        fine_tune_steps=steps if steps is not None else _DEFAULT_FINE_TUNE_STEPS,
    )


def replay_preset(name: str) -> ReplayConfig | None:
    """Tuned (b, k) for a named experiment.

    Returns None for the single-support-set instance row, where replay does
    not apply. Rows outside the tuned tables share the baseline2 buffer
    settings.
    """
    if name not in EXPERIMENT_PRESETS:
        raise PresetError(f"unknown preset {name!r}")
    if name == "instance_exp1":
        return None
    _f, _s, _lr, b, k = _TUNED_CONVNET.get(name, _TUNED_CONVNET["baseline2"])
    return ReplayConfig(b=b, k=k)
