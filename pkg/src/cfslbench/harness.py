"""Experiment orchestration: seeds, tasks, ensembling, and sweeps.

run_experiment executes the full loop for one configuration: split the
dataset into background and evaluation classes, pretrain once per seed,
then run the task stream and record per-task accuracy. A failing seed is
recorded and the run continues, producing a partial report.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .datasets import ClassDataset, SplitSpec, split_background_eval
from .episodes import ExperimentConfig, Task, config_record, derive_counts, task_stream
from .models import LearnerSpec, PretrainConfig, learner_from_snapshot, make_learner
from .replay import ReplayBuffer, ReplayConfig, adapt_with_replay, ensure_replay_applicable
from .reports import RunReport, make_report, make_seed_outcome
from .seeding import derive_rng, derive_seed

_PRETRAIN_STREAM = 0x21
_REPLAY_STREAM = 0x22
_SWEEP_STREAM = 0x23

REFERENCE_NUM_TASKS = 100


class HarnessError(RuntimeError):
    """The harness cannot produce the requested result."""


class EnsembleError(HarnessError):
    """Ensemble evaluation got unusable checkpoints."""


def task_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of target items whose argmax score hits the true label."""
    pred = np.asarray(scores).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def run_task(
    learner,
    task: Task,
    replay: ReplayConfig | None = None,
    replay_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One task lifecycle; returns the (targets, labels) score matrix.

    A fresh buffer per task keeps replay strictly within task boundaries.
    """
    learner.begin_task(task.label_count)
    buffer = ReplayBuffer(replay) if replay is not None else None
    for support_set in task.support_sets:
        if buffer is None:
            learner.adapt(support_set.items)
        else:
            adapt_with_replay(learner, support_set, buffer, replay_rng)
    _, scores = learner.predict([it.image for it in task.target_set])
    return np.asarray(scores)


def _target_labels(task: Task) -> np.ndarray:
    return np.array([it.label for it in task.target_set])


def resolved_config(
    exp: ExperimentConfig,
    learner: LearnerSpec,
    replay: ReplayConfig | None,
    pretrain: PretrainConfig | None = None,
    preset_name: str | None = None,
) -> dict:
    label_count, samples_per_label = derive_counts(exp)
    return {
        "experiment": config_record(exp),
        "learner": asdict(learner),
        "replay": asdict(replay) if replay is not None else None,
        "pretrain": asdict(pretrain) if pretrain is not None else None,
        "preset": preset_name,
        "counts": {"label_count": label_count, "samples_per_label": samples_per_label},
    }


def _budget_flags(
    exp: ExperimentConfig,
    learner: LearnerSpec,
    reference_fine_tune_steps: int | None,
) -> list[str]:
    flags = []
    if exp.num_tasks != REFERENCE_NUM_TASKS:
        flags.append(f"num_tasks={exp.num_tasks} (reference {REFERENCE_NUM_TASKS})")
    if (
        reference_fine_tune_steps is not None
        and learner.fine_tune_steps != reference_fine_tune_steps
    ):
        flags.append(
            f"fine_tune_steps={learner.fine_tune_steps} "
            f"(reference {reference_fine_tune_steps})"
        )
    return flags


def run_experiment(
    data: ClassDataset,
    exp: ExperimentConfig,
    learner: LearnerSpec,
    replay: ReplayConfig | None = None,
    *,
    split: SplitSpec | None = None,
    pretrain: PretrainConfig | None = None,
    learner_factory: Callable[[LearnerSpec, int], object] | None = None,
    ensemble_size: int = 0,
    preset_name: str | None = None,
    reference_fine_tune_steps: int | None = None,
) -> RunReport:
    """Run one configuration across all its seeds.

    Without a pretraining config the whole dataset serves as the evaluation
    pool and learners start from their deterministic initialization;
    otherwise the split's background side feeds pretraining and tasks are
    sampled from the held-out evaluation side.
    """
    if replay is not None:
        ensure_replay_applicable(exp)
    t0 = time.perf_counter()
    if pretrain is None and split is None:
        eval_data = data
    else:
        background, eval_data = split_background_eval(data, split or SplitSpec())
    factory = learner_factory or make_learner

    per_seed = []
    failures: list[dict] = []
    for seed in exp.seeds:
        try:
            model = factory(learner, data.image_size)
            pretrain_log = None
            if pretrain is not None and hasattr(model, "pretrain"):
                pretrain_log = model.pretrain(
                    background, replace(pretrain, seed=derive_seed(seed, _PRETRAIN_STREAM))
                )
            elif hasattr(model, "initialize"):
                model.initialize(seed=seed)
            accuracies = []
            for t_idx, task in enumerate(task_stream(eval_data, exp, master_seed=seed)):
                rng = derive_rng(seed, _REPLAY_STREAM, t_idx) if replay else None
                scores = run_task(model, task, replay, rng)
                accuracies.append(task_accuracy(scores, _target_labels(task)))
            ensemble_acc = None
            if ensemble_size > 0 and pretrain_log is not None and pretrain_log.top_checkpoints:
                ensemble_acc = ensemble_evaluate(
                    pretrain_log.top_checkpoints[:ensemble_size],
                    task_stream(eval_data, exp, master_seed=seed),
                    spec=learner,
                    image_size=data.image_size,
                    replay=replay,
                    seed=seed,
                )
            per_seed.append(make_seed_outcome(seed, accuracies, ensemble_acc))
        except Exception as exc:  # record and continue: seeds are independent trials
            failures.append(
                {"seed": seed, "error": type(exc).__name__, "message": str(exc)}
            )

    return make_report(
        config=resolved_config(exp, learner, replay, pretrain, preset_name),
        per_seed=per_seed,
        wall_time_seconds=time.perf_counter() - t0,
        dataset_fingerprint=data.fingerprint(),
        budget_flags=_budget_flags(exp, learner, reference_fine_tune_steps),
        failures=failures,
    )


def ensemble_evaluate(
    checkpoints: Sequence,
    tasks: Iterable[Task],
    spec: LearnerSpec,
    image_size: int,
    replay: ReplayConfig | None = None,
    seed: int = 0,
) -> float:
    """Mean accuracy of score-averaged predictions across checkpoints.

    Each checkpoint is adapted through the task independently (sharing the
    replay draws), the per-label score vectors are averaged per target
    item, and the argmax of the average is scored. One checkpoint reduces
    to plain evaluation.
    """
    states = [c.state if hasattr(c, "state") else c for c in checkpoints]
    if not states:
        raise EnsembleError("ensemble evaluation needs at least one checkpoint")
    members = []
    for state in states:
        try:
            members.append(learner_from_snapshot(spec, image_size, state))
        except Exception as exc:
            raise EnsembleError(f"checkpoint does not fit the learner spec: {exc}") from exc

    accuracies = []
    for t_idx, task in enumerate(tasks):
        score_sum: np.ndarray | None = None
        for member in members:
            rng = derive_rng(seed, _REPLAY_STREAM, t_idx) if replay else None
            scores = run_task(member, task, replay, rng)
            score_sum = scores if score_sum is None else score_sum + scores
        accuracies.append(task_accuracy(score_sum / len(members), _target_labels(task)))
    if not accuracies:
        raise EnsembleError("no tasks to evaluate")
    return float(np.mean(accuracies))


@dataclass(frozen=True)
class SweepSpec:
    """Grid search description.

    Grid keys address experiment fields (nss, cci, n_way, k_shot,
    num_tasks), learner fields (filters, stages, lr, fine_tune_steps,
    output_dim), or replay fields (b, k). num_tasks, when set, shrinks
    every search run and is recorded on the leaderboard.
    """

    grid: dict
    budget: int | None = None
    num_tasks: int | None = None
    allow_subsample: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ValueError("grid must map names to nonempty value lists")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1")
        object.__setattr__(
            self, "grid", {k: tuple(v) for k, v in self.grid.items()}
        )


_EXP_FIELDS = {"nss", "cci", "n_way", "k_shot", "num_tasks"}
_LEARNER_FIELDS = {"filters", "stages", "lr", "fine_tune_steps", "output_dim"}
_REPLAY_FIELDS = {"b", "k"}


def _apply_point(
    point: dict,
    exp: ExperimentConfig,
    learner: LearnerSpec,
    replay: ReplayConfig | None,
) -> tuple[ExperimentConfig, LearnerSpec, ReplayConfig | None]:
    for key, value in point.items():
        if key in _LEARNER_FIELDS:
            learner = replace(learner, **{key: value})
        elif key in _REPLAY_FIELDS:
            if replay is None:
                raise ValueError(
                    f"grid key {key!r} requires a base replay configuration"
                )
            replay = replace(replay, **{key: value})
        elif key in _EXP_FIELDS:
            exp = replace(exp, **{key: value})
        else:
            known = sorted(_EXP_FIELDS | _LEARNER_FIELDS | _REPLAY_FIELDS)
            raise ValueError(f"unknown grid key {key!r}; known keys: {known}")
    return exp, learner, replay


def _point_key(point: dict) -> str:
    return json.dumps(point, sort_keys=True)


def sweep(
    spec: SweepSpec,
    data: ClassDataset,
    exp: ExperimentConfig,
    learner: LearnerSpec,
    replay: ReplayConfig | None = None,
    **run_kwargs,
) -> tuple[dict, list[dict]]:
    """Grid search over hyperparameters; returns (best config, leaderboard).

    The leaderboard is sorted by mean accuracy descending with ties broken
    by the lexicographic order of the grid point; failed runs sink to the
    bottom but stay recorded.
    """
    keys = sorted(spec.grid)
    points = [
        dict(zip(keys, combo))
        for combo in itertools.product(*(spec.grid[k] for k in keys))
    ]
    if spec.budget is not None and len(points) > spec.budget:
        if not spec.allow_subsample:
            raise ValueError(
                f"grid has {len(points)} points but budget is {spec.budget}; "
                "enable allow_subsample to search a random subset"
            )
        rng = derive_rng(spec.seed, _SWEEP_STREAM)
        chosen = sorted(rng.choice(len(points), size=spec.budget, replace=False))
        points = [points[int(i)] for i in chosen]

    rows = []
    best = None
    for point in points:
        try:
            p_exp, p_learner, p_replay = _apply_point(point, exp, learner, replay)
            if spec.num_tasks is not None:
                p_exp = replace(p_exp, num_tasks=spec.num_tasks)
            report = run_experiment(data, p_exp, p_learner, p_replay, **run_kwargs)
            if not report.per_seed:
                raise HarnessError(
                    "; ".join(f["message"] for f in report.failures) or "all seeds failed"
                )
            row = {
                "params": point,
                "status": "ok",
                "mean": report.overall_mean,
                "std": report.overall_std,
                "num_tasks": p_exp.num_tasks,
                "seeds": list(p_exp.seeds),
                "complete": report.complete,
            }
            rows.append(row)
            candidate = (-report.overall_mean, _point_key(point))
            if best is None or candidate < best[0]:
                best = (
                    candidate,
                    {
                        "params": point,
                        "mean": report.overall_mean,
                        "std": report.overall_std,
                        "experiment": config_record(p_exp),
                        "learner": asdict(p_learner),
                        "replay": asdict(p_replay) if p_replay else None,
                    },
                )
        except Exception as exc:  # a broken point must not kill the sweep
            rows.append(
                {
                    "params": point,
                    "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )

    rows.sort(
        key=lambda r: (
            r["status"] != "ok",
            -(r.get("mean") if r.get("mean") is not None else -np.inf),
            _point_key(r["params"]),
        )
    )
    if best is None:
        raise HarnessError("every sweep run failed; see the leaderboard rows")
    return best[1], rows
