import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfslbench.episodes import ExperimentConfig, sample_task, task_stream
from cfslbench.models import (
    CheckpointError,
    ConvNetLearner,
    DivergenceError,
    InferenceError,
    LearnerSpec,
    LifecycleError,
    PretrainConfig,
    PrototypeStore,
    ProtoNetLearner,
    load_checkpoint,
    make_learner,
    save_checkpoint,
)
from cfslbench.seeding import derive_rng

CONV = LearnerSpec(kind="convnet", filters=8, stages=2, lr=0.05, fine_tune_steps=5)
PROTO = LearnerSpec(kind="protonet", filters=8, stages=2, output_dim=16)


def test_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        LearnerSpec(kind="mlp")
    with pytest.raises(ValueError):
        LearnerSpec(kind="convnet", filters=0)
    with pytest.raises(ValueError):
        LearnerSpec(kind="convnet", lr=0.0)
    with pytest.raises(ValueError):
        LearnerSpec(kind="convnet", fine_tune_steps=-1)


def test_make_learner_dispatch():
    assert isinstance(make_learner(CONV, 20), ConvNetLearner)
    assert isinstance(make_learner(PROTO, 20), ProtoNetLearner)
    with pytest.raises(ValueError):
        ConvNetLearner(PROTO, 20)
    with pytest.raises(ValueError):
        ProtoNetLearner(CONV, 20)


def test_too_many_stages_for_image_size():
    with pytest.raises(ValueError, match="pooling stages"):
        make_learner(LearnerSpec(kind="convnet", stages=6), 20).initialize()


def test_zero_init_head_scores_uniformly(class_pool):
    learner = make_learner(CONV, 20).initialize(seed=0)
    learner.begin_task(10)
    images = [class_pool.classes[i].samples[0].image for i in range(4)]
    labels, scores = learner.predict(images)
    assert np.allclose(scores, 0.1)
    assert labels.tolist() == [0, 0, 0, 0]  # argmax tie resolves to index 0


def test_untrained_convnet_sits_exactly_at_chance(class_pool):
    # Zero head -> uniform scores -> argmax 0. With one target per label the
    # task accuracy is exactly 1/label_count, every single task.
    cfg = ExperimentConfig(nss=4, cci=2, n_way=5, k_shot=1, num_tasks=20, seeds=(0,))
    learner = make_learner(
        LearnerSpec(kind="convnet", filters=8, stages=2, fine_tune_steps=0), 20
    ).initialize(seed=0)
    accs = []
    for task in task_stream(class_pool, cfg, master_seed=0):
        learner.begin_task(task.label_count)
        learner.adapt(task.support_sets[0].items)
        labels, _ = learner.predict([it.image for it in task.target_set])
        want = np.array([it.label for it in task.target_set])
        accs.append(float((labels == want).mean()))
    assert accs == [0.1] * 20


def test_head_matches_label_count():
    learner = make_learner(CONV, 20).initialize(seed=0)
    for n in (2, 7, 31):
        learner.begin_task(n)
        assert learner.head.out_features == n


def test_begin_task_restores_and_rezeroes(class_pool):
    learner = make_learner(CONV, 20).initialize(seed=1)
    learner.begin_task(5)
    h0 = learner.state_hash()
    items = sample_task(
        class_pool,
        ExperimentConfig(nss=1, cci=1, n_way=5, k_shot=1, num_tasks=1, seeds=(0,)),
        derive_rng(0),
    ).support_sets[0].items
    losses_first = learner.adapt(items)
    assert learner.state_hash() != h0  # training moved the trunk
    learner.begin_task(5)
    assert learner.state_hash() == h0
    assert torch.all(learner.head.weight == 0) and torch.all(learner.head.bias == 0)
    assert learner.adapt(items) == losses_first  # full isolation between tasks


def test_begin_task_is_idempotent():
    learner = make_learner(CONV, 20).initialize(seed=2)
    learner.begin_task(6)
    h1 = learner.state_hash()
    head1 = learner.head.weight.detach().clone()
    learner.begin_task(6)
    assert learner.state_hash() == h1
    assert torch.equal(learner.head.weight, head1)


def test_zero_steps_adapt_is_identity(class_pool):
    spec = LearnerSpec(kind="convnet", filters=8, stages=2, fine_tune_steps=0)
    learner = make_learner(spec, 20).initialize(seed=0)
    learner.begin_task(5)
    h = learner.state_hash()
    items = sample_task(
        class_pool,
        ExperimentConfig(nss=1, cci=1, n_way=5, k_shot=1, num_tasks=1, seeds=(0,)),
        derive_rng(1),
    ).support_sets[0].items
    assert learner.adapt(items) == []
    assert learner.state_hash() == h


def test_lifecycle_errors():
    learner = make_learner(CONV, 20)
    with pytest.raises(LifecycleError):
        learner.begin_task(5)
    learner.initialize(seed=0)
    with pytest.raises(LifecycleError):
        learner.predict([np.zeros((20, 20), np.float32)])
    with pytest.raises(LifecycleError):
        learner.fine_tune_step([np.zeros((20, 20), np.float32)], [0])
    with pytest.raises(ValueError):
        learner.begin_task(0)
    proto = make_learner(PROTO, 20)
    with pytest.raises(LifecycleError):
        proto.begin_task(3)
    proto.initialize(seed=0)
    with pytest.raises(LifecycleError):
        proto.adapt([])


def test_non_finite_loss_raises():
    learner = make_learner(CONV, 20).initialize(seed=0)
    learner.begin_task(3)
    bad = np.full((20, 20), np.inf, dtype=np.float32)
    with pytest.raises(DivergenceError):
        learner.fine_tune_step([bad], [0])


def test_zero_weights_give_zero_head_bias_gradient():
    # With a zero-initialized head the logits are zero for any features, so
    # balanced labels make the bias gradient vanish identically.
    learner = make_learner(CONV, 20).initialize(seed=3)
    learner.begin_task(4)
    x = torch.randn(8, 1, 20, 20)
    y = torch.tensor([0, 1, 2, 3] * 2)
    loss = torch.nn.functional.cross_entropy(learner.head(learner.trunk(x)), y)
    loss.backward()
    assert torch.allclose(learner.head.bias.grad, torch.zeros(4), atol=1e-9)


# -- prototype store ---------------------------------------------------------


def _brute_force_predict(vectors, labels, queries, label_count):
    by_label = {}
    for v, lab in zip(vectors, labels):
        by_label.setdefault(lab, []).append(np.asarray(v, dtype=np.float64))
    preds = []
    for q in queries:
        best_label, best_dist = None, np.inf
        for lab in sorted(by_label):
            c = np.mean(by_label[lab], axis=0)
            d = float(np.sum((np.asarray(q, dtype=np.float64) - c) ** 2))
            if d < best_dist:
                best_label, best_dist = lab, d
        preds.append(best_label)
    return np.array(preds)


def test_store_centroids_are_running_means():
    store = PrototypeStore(3)
    store.add(1, [1.0, 0.0])
    store.add(1, [3.0, 2.0])
    store.add(1, [2.0, 4.0])
    assert np.allclose(store.centroid(1), [2.0, 2.0])
    assert store.count(1) == 3 and store.count(0) == 0


def test_store_matches_brute_force_oracle():
    rng = derive_rng(13)
    for _ in range(25):
        label_count = int(rng.integers(2, 8))
        dim = int(rng.integers(2, 16))
        n = int(rng.integers(label_count, 30))
        labels = list(range(label_count)) + [
            int(x) for x in rng.integers(0, label_count, size=n - label_count)
        ]
        vectors = rng.normal(size=(n, dim))
        queries = rng.normal(size=(6, dim))
        store = PrototypeStore(label_count)
        for v, lab in zip(vectors, labels):
            store.add(lab, v)
        got, scores = store.predict(queries)
        want = _brute_force_predict(vectors, labels, queries, label_count)
        assert np.array_equal(got, want)
        assert scores.shape == (6, label_count)


def test_store_absent_labels_score_minus_infinity():
    store = PrototypeStore(4)
    store.add(2, [0.0, 0.0])
    labels, scores = store.predict(np.zeros((1, 2)))
    assert labels.tolist() == [2]
    assert np.isneginf(scores[0, [0, 1, 3]]).all()


def test_store_tie_breaks_toward_smallest_label():
    store = PrototypeStore(3)
    store.add(2, [1.0, 0.0])
    store.add(1, [-1.0, 0.0])
    labels, _ = store.predict(np.zeros((1, 2)))  # equidistant
    assert labels.tolist() == [1]


def test_store_input_validation():
    with pytest.raises(ValueError):
        PrototypeStore(0)
    store = PrototypeStore(2)
    with pytest.raises(ValueError):
        store.add(2, [0.0])
    with pytest.raises(InferenceError):
        store.predict(np.zeros((1, 2)))
    with pytest.raises(InferenceError):
        store.centroid(0)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    shift=st.floats(min_value=-50.0, max_value=50.0, allow_nan=False),
)
def test_translation_leaves_predictions_unchanged(seed, shift):
    rng = derive_rng(seed)
    vectors = rng.normal(size=(10, 5))
    labels = rng.integers(0, 4, size=10)
    queries = rng.normal(size=(4, 5))
    plain = PrototypeStore(4)
    moved = PrototypeStore(4)
    offset = np.full(5, shift)
    for v, lab in zip(vectors, labels):
        plain.add(int(lab), v)
        moved.add(int(lab), v + offset)
    got_plain, _ = plain.predict(queries)
    got_moved, _ = moved.predict(queries + offset)
    assert np.array_equal(got_plain, got_moved)


# -- protonet learner --------------------------------------------------------


def test_protonet_weights_stay_frozen_through_tasks(instance_pool):
    learner = make_learner(PROTO, 20).initialize(seed=4)
    frozen = learner.state_hash()
    cfg = ExperimentConfig(nss=2, cci=2, n_way=1, k_shot=5, mode="instance",
                           num_tasks=3, seeds=(0,))
    for task in task_stream(instance_pool, cfg, master_seed=0):
        learner.begin_task(task.label_count)
        for ss in task.support_sets:
            learner.adapt(ss.items)
        learner.predict([it.image for it in task.target_set])
    assert learner.state_hash() == frozen


def test_protonet_single_prototype_forces_prediction(instance_pool):
    learner = make_learner(PROTO, 20).initialize(seed=5)
    learner.begin_task(4)
    items = sample_task(
        instance_pool,
        ExperimentConfig(nss=1, cci=1, n_way=1, k_shot=4, mode="instance",
                         num_tasks=1, seeds=(0,)),
        derive_rng(2),
    ).support_sets[0].items
    learner.store.add(2, learner.embed([items[0].image])[0])
    labels, _ = learner.predict([it.image for it in items])
    assert labels.tolist() == [2, 2, 2, 2]


def test_protonet_predict_requires_prototypes():
    learner = make_learner(PROTO, 20).initialize(seed=0)
    learner.begin_task(3)
    with pytest.raises(InferenceError):
        learner.predict([np.zeros((20, 20), np.float32)])


def test_protonet_begin_task_clears_store(instance_pool):
    learner = make_learner(PROTO, 20).initialize(seed=0)
    learner.begin_task(3)
    learner.store.add(0, np.zeros(16))
    learner.begin_task(3)
    assert len(learner.store) == 0


# -- pretraining and checkpoints ---------------------------------------------


def test_convnet_pretraining_produces_log_and_checkpoints(class_pool):
    learner = make_learner(CONV, 20)
    log = learner.pretrain(
        class_pool, PretrainConfig(epochs=2, iterations=10, batch_size=16, keep_top=3)
    )
    assert len(log.epoch_losses) == 2
    assert all(np.isfinite(l) for l in log.epoch_losses)
    assert len(log.val_history) == 2
    assert 1 <= len(log.top_checkpoints) <= 3
    accs = [c.val_accuracy for c in log.top_checkpoints]
    assert accs == sorted(accs, reverse=True)
    assert learner.has_snapshot
    assert learner.head is None  # the background head never leaks into tasks


def test_protonet_pretraining_runs_and_freezes(class_pool):
    learner = make_learner(PROTO, 20)
    log = learner.pretrain(
        class_pool,
        PretrainConfig(epochs=1, iterations=10, episode_way=5, val_episodes=3),
    )
    assert len(log.epoch_losses) == 1
    assert learner.has_snapshot
    h = learner.state_hash()
    learner.begin_task(2)
    learner.adapt(
        [
            type("It", (), {"image": class_pool.classes[0].samples[0].image, "label": 0})(),
        ]
    )
    assert learner.state_hash() == h


def test_pretraining_is_seed_deterministic(class_pool):
    a = make_learner(CONV, 20)
    b = make_learner(CONV, 20)
    cfg = PretrainConfig(epochs=1, iterations=8, batch_size=8, seed=7)
    log_a = a.pretrain(class_pool, cfg)
    log_b = b.pretrain(class_pool, cfg)
    assert log_a.epoch_losses == log_b.epoch_losses
    assert a.state_hash() == b.state_hash()


def test_checkpoint_round_trip(tmp_path):
    learner = make_learner(CONV, 20).initialize(seed=6)
    path = tmp_path / "model.pt"
    save_checkpoint(learner, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == learner.spec
    assert loaded.image_size == learner.image_size
    assert loaded.state_hash() == learner.state_hash()


def test_checkpoint_rejects_future_version(tmp_path):
    learner = make_learner(CONV, 20).initialize(seed=0)
    path = tmp_path / "model.pt"
    save_checkpoint(learner, path)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="newer"):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "model.pt"
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(LifecycleError):
        save_checkpoint(make_learner(CONV, 20), path)


def test_clone_with_snapshot_is_independent():
    learner = make_learner(CONV, 20).initialize(seed=8)
    clone = learner.clone_with_snapshot(learner._snapshot)
    assert clone.state_hash() == learner.state_hash()
    clone.begin_task(3)
    clone.fine_tune_step([np.random.rand(20, 20).astype(np.float32)], [1])
    assert clone.state_hash() != learner.state_hash()
