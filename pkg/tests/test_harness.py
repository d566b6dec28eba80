import zlib

import numpy as np
import pytest

from cfslbench.episodes import ExperimentConfig, sample_task, task_stream
from cfslbench.harness import (
    EnsembleError,
    HarnessError,
    REFERENCE_NUM_TASKS,
    SweepSpec,
    ensemble_evaluate,
    resolved_config,
    run_experiment,
    run_task,
    sweep,
    task_accuracy,
)
from cfslbench.models import LearnerSpec, PretrainConfig, make_learner
from cfslbench.replay import ReplayConfig, ReplayNotApplicableError
from cfslbench.seeding import derive_rng

CONV = LearnerSpec(kind="convnet", filters=8, stages=2, lr=0.05, fine_tune_steps=2)
EXP = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=3, seeds=(0, 1))


class _OracleLearner:
    """Knows the dataset's image-to-class map; perfect after one exposure."""

    def __init__(self, data):
        self._class_of = {
            s.image.tobytes(): c.class_id for c in data.classes for s in c.samples
        }
        self.label_count = None
        self._label_of = {}

    def begin_task(self, label_count):
        self.label_count = label_count
        self._label_of = {}

    def adapt(self, items):
        for it in items:
            self._label_of[it.class_id] = it.label
        return []

    def predict(self, images):
        labels = np.array(
            [self._label_of[self._class_of[np.asarray(im).tobytes()]] for im in images]
        )
        scores = np.zeros((len(labels), self.label_count))
        scores[np.arange(len(labels)), labels] = 1.0
        return labels, scores


class _HashLearner:
    """Deterministic pseudo-random predictions keyed on image content."""

    def __init__(self, *_args):
        self.label_count = None

    def initialize(self, seed=0):
        return self

    def begin_task(self, label_count):
        self.label_count = label_count

    def adapt(self, items):
        return []

    def predict(self, images):
        labels = np.array(
            [zlib.crc32(np.asarray(im).tobytes()) % self.label_count for im in images]
        )
        scores = np.zeros((len(labels), self.label_count))
        scores[np.arange(len(labels)), labels] = 1.0
        return labels, scores


class _SeedOneFails(_HashLearner):
    def initialize(self, seed=0):
        if seed == 1:
            raise ValueError("injected seed failure")
        return self


def test_task_accuracy_counts_argmax_hits():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert task_accuracy(scores, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_run_task_with_oracle_learner_is_perfect(class_pool):
    task = sample_task(class_pool, EXP, derive_rng(0))
    learner = _OracleLearner(class_pool)
    scores = run_task(learner, task)
    assert scores.shape == (task.label_count, task.label_count)
    assert task_accuracy(scores, np.array([it.label for it in task.target_set])) == 1.0


def test_run_experiment_statistics_are_recomputable(class_pool):
    report = run_experiment(
        class_pool, EXP, CONV, learner_factory=lambda spec, size: _HashLearner()
    )
    assert report.complete
    seed_means = []
    for outcome in report.per_seed:
        accs = outcome.per_task_accuracies
        assert len(accs) == EXP.num_tasks
        assert outcome.mean == pytest.approx(np.mean(accs))
        assert outcome.std == pytest.approx(np.std(accs))
        seed_means.append(outcome.mean)
    assert report.overall_mean == pytest.approx(np.mean(seed_means))
    assert report.overall_std == pytest.approx(np.std(seed_means))
    assert report.dataset_fingerprint == class_pool.fingerprint()
    assert report.wall_time_seconds > 0


def test_seeds_are_isolated_from_each_other(class_pool):
    factory = lambda spec, size: _HashLearner()
    both = run_experiment(class_pool, EXP, CONV, learner_factory=factory)
    alone = run_experiment(
        class_pool,
        ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=3, seeds=(1,)),
        CONV,
        learner_factory=factory,
    )
    seed1 = next(o for o in both.per_seed if o.seed == 1)
    assert seed1.per_task_accuracies == alone.per_seed[0].per_task_accuracies


def test_failing_seed_yields_partial_report(class_pool):
    report = run_experiment(
        class_pool, EXP, CONV, learner_factory=lambda spec, size: _SeedOneFails()
    )
    assert not report.complete
    assert [o.seed for o in report.per_seed] == [0]
    assert report.failures == [
        {"seed": 1, "error": "ValueError", "message": "injected seed failure"}
    ]


def test_budget_flags_record_reduced_settings(class_pool):
    report = run_experiment(
        class_pool,
        EXP,
        CONV,
        learner_factory=lambda spec, size: _HashLearner(),
        reference_fine_tune_steps=120,
    )
    assert f"num_tasks={EXP.num_tasks} (reference {REFERENCE_NUM_TASKS})" in report.budget_flags
    assert "fine_tune_steps=2 (reference 120)" in report.budget_flags


def test_resolved_config_carries_every_section(class_pool):
    cfg = resolved_config(EXP, CONV, ReplayConfig(b=2, k=4), None, "demo")
    assert cfg["experiment"]["nss"] == 2
    assert cfg["learner"]["filters"] == 8
    assert cfg["replay"] == {"b": 2, "k": 4}
    assert cfg["pretrain"] is None
    assert cfg["preset"] == "demo"
    assert cfg["counts"] == {"label_count": 3, "samples_per_label": 2}


def test_replay_on_single_set_stream_is_refused(class_pool):
    exp = ExperimentConfig(nss=1, cci=1, n_way=3, k_shot=1, num_tasks=1, seeds=(0,))
    with pytest.raises(ReplayNotApplicableError):
        run_experiment(class_pool, exp, CONV, ReplayConfig(b=2, k=4))


def test_real_convnet_run_with_replay_is_reproducible(class_pool):
    exp = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=2, seeds=(0,))
    kwargs = dict(replay=ReplayConfig(b=2, k=4))
    a = run_experiment(class_pool, exp, CONV, **kwargs)
    b = run_experiment(class_pool, exp, CONV, **kwargs)
    assert a.per_seed[0].per_task_accuracies == b.per_seed[0].per_task_accuracies
    assert a.overall_mean == b.overall_mean


# -- ensembling ---------------------------------------------------------------


def _snapshot(seed):
    return make_learner(CONV, 20).initialize(seed=seed)._snapshot


def test_single_checkpoint_ensemble_equals_plain_evaluation(class_pool):
    exp = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=2, seeds=(0,))
    snap = _snapshot(11)
    tasks = list(task_stream(class_pool, exp, master_seed=0))
    got = ensemble_evaluate([snap], tasks, spec=CONV, image_size=20)

    from cfslbench.models import learner_from_snapshot

    member = learner_from_snapshot(CONV, 20, snap)
    accs = [
        task_accuracy(run_task(member, t), np.array([it.label for it in t.target_set]))
        for t in tasks
    ]
    assert got == pytest.approx(np.mean(accs))


def test_duplicated_checkpoints_change_nothing(class_pool):
    exp = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=2, seeds=(0,))
    snap = _snapshot(12)
    tasks = lambda: task_stream(class_pool, exp, master_seed=0)
    one = ensemble_evaluate([snap], tasks(), spec=CONV, image_size=20)
    two = ensemble_evaluate([snap, snap], tasks(), spec=CONV, image_size=20)
    assert one == two


def test_ensemble_input_validation(class_pool):
    exp = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=1, seeds=(0,))
    tasks = list(task_stream(class_pool, exp, master_seed=0))
    with pytest.raises(EnsembleError, match="at least one"):
        ensemble_evaluate([], tasks, spec=CONV, image_size=20)
    with pytest.raises(EnsembleError, match="no tasks"):
        ensemble_evaluate([_snapshot(0)], [], spec=CONV, image_size=20)
    wide = LearnerSpec(kind="convnet", filters=16, stages=2)
    with pytest.raises(EnsembleError, match="spec"):
        ensemble_evaluate([_snapshot(0)], tasks, spec=wide, image_size=20)


def test_pretrained_run_reports_ensemble_accuracy(class_pool):
    exp = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=2, seeds=(0,))
    report = run_experiment(
        class_pool,
        exp,
        CONV,
        pretrain=PretrainConfig(epochs=1, iterations=6, batch_size=8, keep_top=2),
        ensemble_size=2,
    )
    assert report.complete
    assert report.per_seed[0].ensemble_accuracy is not None
    assert 0.0 <= report.ensemble_accuracy <= 1.0


# -- sweeps -------------------------------------------------------------------

SWEEP_EXP = ExperimentConfig(nss=2, cci=2, n_way=3, k_shot=1, num_tasks=2, seeds=(0,))


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(grid={})
    with pytest.raises(ValueError):
        SweepSpec(grid={"lr": []})
    with pytest.raises(ValueError):
        SweepSpec(grid={"lr": [0.1]}, budget=0)


def test_sweep_covers_grid_and_sorts_by_mean(class_pool):
    spec = SweepSpec(grid={"lr": (0.01, 0.05), "fine_tune_steps": (1, 2)})
    best, rows = sweep(spec, class_pool, SWEEP_EXP, CONV)
    assert len(rows) == 4
    assert all(r["status"] == "ok" for r in rows)
    means = [r["mean"] for r in rows]
    assert means == sorted(means, reverse=True)
    assert best["params"] == rows[0]["params"]
    assert best["mean"] == rows[0]["mean"]
    assert best["learner"]["lr"] == best["params"]["lr"]
    assert rows[0]["num_tasks"] == 2 and rows[0]["seeds"] == [0]


def test_sweep_is_deterministic(class_pool):
    spec = SweepSpec(grid={"lr": (0.01, 0.05)})
    first = sweep(spec, class_pool, SWEEP_EXP, CONV)
    second = sweep(spec, class_pool, SWEEP_EXP, CONV)
    assert first == second


def test_sweep_records_failed_points_at_the_bottom(class_pool):
    # nss=1 points break in two different ways (indivisible cci, replay gate);
    # both must surface as failed rows below the healthy ones.
    spec = SweepSpec(grid={"nss": (1, 2), "cci": (1, 2)})
    best, rows = sweep(spec, class_pool, SWEEP_EXP, CONV, ReplayConfig(b=2, k=2))
    assert best["params"]["nss"] == 2
    assert [r["status"] for r in rows] == ["ok", "ok", "failed", "failed"]
    failed = {tuple(sorted(r["params"].items())): r["error"] for r in rows[2:]}
    assert "ReplayNotApplicableError" in failed[(("cci", 1), ("nss", 1))]
    assert "ConfigError" in failed[(("cci", 2), ("nss", 1))]


def test_sweep_with_every_point_broken_raises(class_pool):
    with pytest.raises(HarnessError, match="every sweep run failed"):
        sweep(SweepSpec(grid={"bogus": (1,)}), class_pool, SWEEP_EXP, CONV)
    with pytest.raises(HarnessError):
        # replay grid keys without a base replay configuration
        sweep(SweepSpec(grid={"k": (1, 2)}), class_pool, SWEEP_EXP, CONV)


def test_sweep_budget_subsamples_deterministically(class_pool):
    grid = {"lr": (0.01, 0.02, 0.05), "fine_tune_steps": (1, 2)}
    spec = SweepSpec(grid=grid, budget=2, allow_subsample=True, seed=3)
    _, rows = sweep(spec, class_pool, SWEEP_EXP, CONV)
    assert len(rows) == 2
    _, again = sweep(spec, class_pool, SWEEP_EXP, CONV)
    assert rows == again
    with pytest.raises(ValueError, match="allow_subsample"):
        sweep(SweepSpec(grid=grid, budget=2), class_pool, SWEEP_EXP, CONV)


def test_sweep_num_tasks_override_is_applied(class_pool):
    spec = SweepSpec(grid={"lr": (0.05,)}, num_tasks=1)
    _, rows = sweep(spec, class_pool, SWEEP_EXP, CONV)
    assert rows[0]["num_tasks"] == 1
