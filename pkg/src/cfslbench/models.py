"""Baseline learners: a fine-tunable convnet and a frozen-embedding
prototype classifier.

Both follow the same lifecycle: pretrain once on background classes, then
per task call begin_task, adapt on each support set in order, and predict on
the target set. The convnet acquires task knowledge by gradient fine-tuning
from its pretrained snapshot; the prototype learner keeps its weights frozen
and accumulates class centroids in a store owned by the evaluation loop.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .datasets import ClassDataset
from .seeding import derive_rng, derive_seed

CONVNET = "convnet"
PROTONET = "protonet"

_INIT_STREAM = 0x11
_BATCH_STREAM = 0x12
_EPISODE_STREAM = 0x13

CHECKPOINT_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class LifecycleError(RuntimeError):
    """A lifecycle step was called out of order."""


class InferenceError(RuntimeError):
    """Prediction requested without the state it needs."""


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be used."""


@dataclass(frozen=True)
class LearnerSpec:
    """Architecture and fine-tuning settings for a learner."""

    kind: str
    filters: int = 64
    stages: int = 3
    lr: float = 0.01
    fine_tune_steps: int = 60
    output_dim: int = 64  # embedding width; the convnet head is sized per task

    def __post_init__(self) -> None:
        if self.kind not in (CONVNET, PROTONET):
            raise ValueError(f"kind must be '{CONVNET}' or '{PROTONET}', got {self.kind!r}")
        if self.filters < 1 or self.stages < 1 or self.output_dim < 1:
            raise ValueError("filters, stages, and output_dim must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.fine_tune_steps < 0:
            raise ValueError("fine_tune_steps must be >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    """Pretraining budget and schedule.

    The reference convnet budget is 10 epochs of 100 iterations; desk-scale
    runs shrink both. Protonet pretraining is episodic (episode_way-way,
    one-shot, episode_queries queries per class).
    """

    epochs: int = 10
    iterations: int = 100
    batch_size: int = 32
    episode_way: int = 20
    episode_queries: int = 1
    lr: float = 1e-3
    val_fraction: float = 0.1
    val_every: int = 0  # 0: validate once per epoch
    val_episodes: int = 10
    keep_top: int = 5
    seed: int = 0


@dataclass
class Checkpoint:
    val_accuracy: float
    iteration: int
    state: dict


@dataclass
class PretrainLog:
    epoch_losses: list[float]
    val_history: list[tuple[int, float]]
    top_checkpoints: list[Checkpoint] = field(default_factory=list)


def build_conv_trunk(
    filters: int, stages: int, image_size: int, dtype: torch.dtype = torch.float32
) -> tuple[nn.Sequential, int]:
    """Stack of conv-batchnorm-relu-pool stages; returns (module, flat dim)."""
    hw = image_size
    layers: list[nn.Module] = []
    in_ch = 1
    for _ in range(stages):
        layers += [
            nn.Conv2d(in_ch, filters, kernel_size=3, padding=1),
            nn.BatchNorm2d(filters),
            nn.ReLU(),
            nn.MaxPool2d(2),
        ]
        in_ch = filters
        hw //= 2
    if hw < 1:
        raise ValueError(
            f"{stages} pooling stages collapse a {image_size}px image to nothing"
        )
    layers.append(nn.Flatten())
    trunk = nn.Sequential(*layers).to(dtype)
    return trunk, filters * hw * hw


def _to_tensor(images: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    batch = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(batch).unsqueeze(1)  # (N, 1, H, W)


def _state_bytes_hash(states: dict[str, dict]) -> str:
    h = hashlib.sha256()
    for mod_name in sorted(states):
        for key in sorted(states[mod_name]):
            h.update(f"{mod_name}.{key}".encode())
            h.update(states[mod_name][key].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _split_sample_slices(
    data: ClassDataset, val_fraction: float
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Per-class (class_idx, sample_idx) pools: the tail slice is held out."""
    train, val = [], []
    for ci, cls in enumerate(data.classes):
        n = len(cls.samples)
        n_val = int(round(val_fraction * n)) if n >= 2 else 0
        n_val = min(n_val, n - 1)
        for si in range(n - n_val):
            train.append((ci, si))
        for si in range(n - n_val, n):
            val.append((ci, si))
    return train, val


class PrototypeStore:
    """Running per-label centroids over embedding vectors.

    The evaluation loop, not the network, owns this memory: folding in a
    vector updates a (sum, count) pair and never touches model weights.
    """

    def __init__(self, label_count: int):
        if label_count < 1:
            raise ValueError("label_count must be positive")
        self.label_count = label_count
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._sums)

    def add(self, label: int, vector: np.ndarray) -> None:
        if not 0 <= label < self.label_count:
            raise ValueError(f"label {label} outside 0..{self.label_count - 1}")
        vec = np.asarray(vector, dtype=np.float64)
        if label in self._sums:
            self._sums[label] = self._sums[label] + vec
            self._counts[label] += 1
        else:
            self._sums[label] = vec.copy()
            self._counts[label] = 1

    def count(self, label: int) -> int:
        return self._counts.get(label, 0)

    def centroid(self, label: int) -> np.ndarray:
        if label not in self._sums:
            raise InferenceError(f"no prototype stored for label {label}")
        return self._sums[label] / self._counts[label]

    def predict(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-centroid labels and a (N, label_count) score matrix.

        Scores are negative squared Euclidean distances; labels without a
        prototype score -inf. Ties resolve to the smallest label index.
        """
        if not self._sums:
            raise InferenceError("no prototypes stored")
        q = np.asarray(queries, dtype=np.float64)
        scores = np.full((q.shape[0], self.label_count), -np.inf, dtype=np.float64)
        for label in self._sums:
            c = self.centroid(label)
            scores[:, label] = -np.square(q - c[None, :]).sum(axis=1)
        return scores.argmax(axis=1), scores


class Learner:
    """Shared lifecycle for both baseline models."""

    def __init__(self, spec: LearnerSpec, image_size: int):
        self.spec = spec
        self.image_size = image_size
        self._snapshot: dict[str, dict] | None = None
        self._label_count: int | None = None

    # -- construction ------------------------------------------------------

    def _backbone(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    def _build(self, seed: int) -> None:
        raise NotImplementedError

    def initialize(self, seed: int = 0) -> "Learner":
        """Build modules deterministically and snapshot the fresh state.

        Pretraining calls this internally; calling it directly yields an
        untrained learner whose begin_task still works.
        """
        self._build(seed)
        self._snapshot = self._backbone_state()
        return self

    @property
    def has_snapshot(self) -> bool:
        return self._snapshot is not None

    def _backbone_state(self) -> dict[str, dict]:
        return {
            name: copy.deepcopy(mod.state_dict())
            for name, mod in self._backbone().items()
        }

    def _load_backbone_state(self, states: dict[str, dict]) -> None:
        for name, mod in self._backbone().items():
            mod.load_state_dict(copy.deepcopy(states[name]))

    def state_hash(self) -> str:
        """Content hash of the backbone parameters and buffers."""
        return _state_bytes_hash(
            {name: mod.state_dict() for name, mod in self._backbone().items()}
        )

    def clone_with_snapshot(self, snapshot: dict[str, dict]) -> "Learner":
        """Fresh learner whose pretrained state is the given snapshot."""
        return learner_from_snapshot(self.spec, self.image_size, snapshot)

    # -- lifecycle ---------------------------------------------------------

    def pretrain(self, background: ClassDataset, cfg: PretrainConfig) -> PretrainLog:
        raise NotImplementedError

    def begin_task(self, label_count: int) -> None:
        raise NotImplementedError

    def adapt(self, items: Sequence, rng: np.random.Generator | None = None) -> list[float]:
        raise NotImplementedError

    def predict(self, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class ConvNetLearner(Learner):
    """Plain convnet trained with minibatch gradient descent.

    Pretraining attaches a temporary head over the background classes and
    discards it; each task restores the pretrained trunk, zero-initializes a
    fresh head sized to the task's label count, and fine-tunes with plain
    SGD on each support set.
    """

    def __init__(self, spec: LearnerSpec, image_size: int):
        if spec.kind != CONVNET:
            raise ValueError(f"ConvNetLearner needs a convnet spec, got {spec.kind!r}")
        super().__init__(spec, image_size)
        self.trunk: nn.Sequential | None = None
        self.head: nn.Linear | None = None
        self._feat_dim: int | None = None
        self._opt: torch.optim.Optimizer | None = None

    def _backbone(self) -> dict[str, nn.Module]:
        if self.trunk is None:
            raise LifecycleError("learner not built; call initialize or pretrain first")
        return {"trunk": self.trunk}

    def _build(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, _INIT_STREAM))
            self.trunk, self._feat_dim = build_conv_trunk(
                self.spec.filters, self.spec.stages, self.image_size
            )
        self.head = None
        self._opt = None

    # -- pretraining -------------------------------------------------------

    def pretrain(self, background: ClassDataset, cfg: PretrainConfig) -> PretrainLog:
        if background.num_classes < 1:
            raise ValueError("pretraining requires a nonempty background dataset")
        self._build(cfg.seed)
        n_classes = background.num_classes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, _INIT_STREAM, 1))
            head = nn.Linear(self._feat_dim, n_classes)

        train_pool, val_pool = _split_sample_slices(background, cfg.val_fraction)
        score_pool = val_pool if val_pool else train_pool
        rng = derive_rng(cfg.seed, _BATCH_STREAM)
        opt = torch.optim.Adam(
            list(self.trunk.parameters()) + list(head.parameters()), lr=cfg.lr
        )
        ce = nn.CrossEntropyLoss()
        val_every = cfg.val_every if cfg.val_every > 0 else cfg.iterations

        def batch_at(indices: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
            imgs = [background.classes[c].samples[s].image for c, s in (train_pool[i] for i in indices)]
            labels = [train_pool[i][0] for i in indices]
            return _to_tensor(imgs), torch.tensor(labels, dtype=torch.long)

        epoch_losses: list[float] = []
        val_history: list[tuple[int, float]] = []
        top: list[Checkpoint] = []
        step = 0
        for _epoch in range(cfg.epochs):
            losses = []
            for _ in range(cfg.iterations):
                idx = rng.integers(0, len(train_pool), size=cfg.batch_size)
                x, y = batch_at(idx)
                self.trunk.train()
                head.train()
                loss = ce(head(self.trunk(x)), y)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite pretraining loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
                step += 1
                if step % val_every == 0:
                    acc = self._pool_accuracy(head, background, score_pool)
                    val_history.append((step, acc))
                    top.append(
                        Checkpoint(val_accuracy=acc, iteration=step, state=self._backbone_state())
                    )
                    top.sort(key=lambda c: (-c.val_accuracy, c.iteration))
                    del top[cfg.keep_top:]
            epoch_losses.append(float(np.mean(losses)))

        self._snapshot = self._backbone_state()
        self.head = None
        self._opt = None
        return PretrainLog(epoch_losses, val_history, top)

    def _pool_accuracy(
        self, head: nn.Linear, data: ClassDataset, pool: list[tuple[int, int]]
    ) -> float:
        self.trunk.eval()
        head.eval()
        correct = 0
        with torch.no_grad():
            for start in range(0, len(pool), 256):
                chunk = pool[start : start + 256]
                x = _to_tensor([data.classes[c].samples[s].image for c, s in chunk])
                y = np.array([c for c, _ in chunk])
                pred = head(self.trunk(x)).numpy().argmax(axis=1)
                correct += int((pred == y).sum())
        return correct / len(pool)

    # -- task lifecycle ----------------------------------------------------

    def begin_task(self, label_count: int) -> None:
        """Restore the pretrained trunk and attach a zero-initialized head.

        Zero initialization makes the fresh head deterministic and scores
        every label equally until the first fine-tune step.
        """
        if self._snapshot is None:
            raise LifecycleError("begin_task requires a pretrained snapshot")
        if label_count < 1:
            raise ValueError("label_count must be positive")
        self._load_backbone_state(self._snapshot)
        head = nn.Linear(self._feat_dim, label_count)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        self.head = head
        self._label_count = label_count
        self._opt = torch.optim.SGD(
            list(self.trunk.parameters()) + list(self.head.parameters()),
            lr=self.spec.lr,
        )

    def fine_tune_step(self, images: Sequence[np.ndarray], labels: Sequence[int]) -> float:
        """One full-batch gradient step of cross-entropy on the given items."""
        if self.head is None or self._opt is None:
            raise LifecycleError("begin_task must run before fine-tuning")
        x = _to_tensor(images)
        y = torch.tensor(list(labels), dtype=torch.long)
        self.trunk.train()
        self.head.train()
        loss = nn.functional.cross_entropy(self.head(self.trunk(x)), y)
        if not torch.isfinite(loss):
            raise DivergenceError("non-finite fine-tuning loss")
        self._opt.zero_grad()
        loss.backward()
        self._opt.step()
        return float(loss.detach())

    def adapt(self, items: Sequence, rng: np.random.Generator | None = None) -> list[float]:
        images = [it.image for it in items]
        labels = [it.label for it in items]
        return [self.fine_tune_step(images, labels) for _ in range(self.spec.fine_tune_steps)]

    def predict(self, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Argmax labels plus per-label softmax scores."""
        if self.head is None:
            raise LifecycleError("begin_task must run before predict")
        self.trunk.eval()
        self.head.eval()
        with torch.no_grad():
            probs = torch.softmax(self.head(self.trunk(_to_tensor(images))), dim=1)
        scores = probs.numpy().astype(np.float64)
        return scores.argmax(axis=1), scores


class ProtoNetLearner(Learner):
    """Embedding network with nearest-centroid classification.

    After episodic pretraining the weights never change again: adapting to a
    support set only folds embeddings into the prototype store, and
    prediction is an argmin over squared Euclidean distances.
    """

    def __init__(self, spec: LearnerSpec, image_size: int):
        if spec.kind != PROTONET:
            raise ValueError(f"ProtoNetLearner needs a protonet spec, got {spec.kind!r}")
        super().__init__(spec, image_size)
        self.trunk: nn.Sequential | None = None
        self.proj: nn.Linear | None = None
        self.store: PrototypeStore | None = None
        self._feat_dim: int | None = None

    def _backbone(self) -> dict[str, nn.Module]:
        if self.trunk is None or self.proj is None:
            raise LifecycleError("learner not built; call initialize or pretrain first")
        return {"trunk": self.trunk, "proj": self.proj}

    def _build(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, _INIT_STREAM))
            self.trunk, self._feat_dim = build_conv_trunk(
                self.spec.filters, self.spec.stages, self.image_size
            )
            self.proj = nn.Linear(self._feat_dim, self.spec.output_dim)
        self.store = None

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """Frozen-weight embeddings as float64, for the prototype store."""
        self.trunk.eval()
        self.proj.eval()
        with torch.no_grad():
            z = self.proj(self.trunk(_to_tensor(images)))
        return z.numpy().astype(np.float64)

    def _embed_train(self, x: torch.Tensor) -> torch.Tensor:
        self.trunk.train()
        self.proj.train()
        return self.proj(self.trunk(x))

    def pretrain(self, background: ClassDataset, cfg: PretrainConfig) -> PretrainLog:
        if background.num_classes < 1:
            raise ValueError("pretraining requires a nonempty background dataset")
        self._build(cfg.seed)
        train_pool, val_pool = _split_sample_slices(background, cfg.val_fraction)
        by_class: dict[int, list[int]] = {}
        for ci, si in train_pool:
            by_class.setdefault(ci, []).append(si)
        val_by_class: dict[int, list[int]] = {}
        for ci, si in val_pool:
            val_by_class.setdefault(ci, []).append(si)

        need = 1 + cfg.episode_queries
        eligible = [ci for ci, sis in by_class.items() if len(sis) >= need]
        if len(eligible) < 2:
            raise ValueError(
                "episodic pretraining needs at least 2 background classes with "
                f"{need} or more training samples"
            )
        way = min(cfg.episode_way, len(eligible))
        rng = derive_rng(cfg.seed, _EPISODE_STREAM)
        opt = torch.optim.Adam(
            list(self.trunk.parameters()) + list(self.proj.parameters()), lr=cfg.lr
        )
        val_every = cfg.val_every if cfg.val_every > 0 else cfg.iterations

        def draw_episode(pool_by_class: dict[int, list[int]], query_pool=None):
            class_ids = rng.choice(len(eligible), size=way, replace=False)
            sup_imgs, qry_imgs, qry_labels = [], [], []
            for slot, ei in enumerate(class_ids):
                ci = eligible[int(ei)]
                sis = pool_by_class[ci]
                if query_pool is not None and query_pool.get(ci):
                    sup_imgs.append(_img(background, ci, sis[int(rng.integers(len(sis)))]))
                    qs = query_pool[ci]
                    pick = qs[int(rng.integers(len(qs)))]
                    qry_imgs.append(_img(background, ci, pick))
                    qry_labels.append(slot)
                else:
                    picks = rng.choice(len(sis), size=need, replace=False)
                    sup_imgs.append(_img(background, ci, sis[int(picks[0])]))
                    for p in picks[1:]:
                        qry_imgs.append(_img(background, ci, sis[int(p)]))
                        qry_labels.append(slot)
            return sup_imgs, qry_imgs, qry_labels

        def episode_loss(sup_imgs, qry_imgs, qry_labels) -> torch.Tensor:
            z = self._embed_train(_to_tensor(sup_imgs + qry_imgs))
            protos = z[: len(sup_imgs)]
            queries = z[len(sup_imgs):]
            logits = -torch.cdist(queries, protos).square()
            return nn.functional.cross_entropy(
                logits, torch.tensor(qry_labels, dtype=torch.long)
            )

        def val_accuracy() -> float:
            self.trunk.eval()
            self.proj.eval()
            correct = total = 0
            with torch.no_grad():
                for _ in range(cfg.val_episodes):
                    sup, qry, labels = draw_episode(by_class, query_pool=val_by_class)
                    z = self.proj(self.trunk(_to_tensor(sup + qry)))
                    logits = -torch.cdist(z[len(sup):], z[: len(sup)]).square()
                    pred = logits.numpy().argmax(axis=1)
                    correct += int((pred == np.array(labels)).sum())
                    total += len(labels)
            return correct / total

        epoch_losses: list[float] = []
        val_history: list[tuple[int, float]] = []
        top: list[Checkpoint] = []
        step = 0
        for _epoch in range(cfg.epochs):
            losses = []
            for _ in range(cfg.iterations):
                loss = episode_loss(*draw_episode(by_class))
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite episodic loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
                step += 1
                if step % val_every == 0:
                    acc = val_accuracy()
                    val_history.append((step, acc))
                    top.append(
                        Checkpoint(val_accuracy=acc, iteration=step, state=self._backbone_state())
                    )
                    top.sort(key=lambda c: (-c.val_accuracy, c.iteration))
                    del top[cfg.keep_top:]
            epoch_losses.append(float(np.mean(losses)))

        self._snapshot = self._backbone_state()
        self.store = None
        return PretrainLog(epoch_losses, val_history, top)

    def begin_task(self, label_count: int) -> None:
        """Clear the prototype store; the network itself is left untouched."""
        if self._snapshot is None:
            raise LifecycleError("begin_task requires a pretrained snapshot")
        if label_count < 1:
            raise ValueError("label_count must be positive")
        self.store = PrototypeStore(label_count)
        self._label_count = label_count

    def adapt(self, items: Sequence, rng: np.random.Generator | None = None) -> list[float]:
        if self.store is None:
            raise LifecycleError("begin_task must run before adapt")
        embeddings = self.embed([it.image for it in items])
        for it, z in zip(items, embeddings):
            self.store.add(it.label, z)
        return []

    def predict(self, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        if self.store is None:
            raise LifecycleError("begin_task must run before predict")
        if len(self.store) == 0:
            raise InferenceError("predict requires at least one stored prototype")
        return self.store.predict(self.embed(images))


def _img(data: ClassDataset, class_idx: int, sample_idx: int) -> np.ndarray:
    return data.classes[class_idx].samples[sample_idx].image


def make_learner(spec: LearnerSpec, image_size: int) -> Learner:
    if spec.kind == CONVNET:
        return ConvNetLearner(spec, image_size)
    return ProtoNetLearner(spec, image_size)


def learner_from_snapshot(spec: LearnerSpec, image_size: int, snapshot: dict) -> Learner:
    """Build a learner whose pretrained snapshot is the given state."""
    learner = make_learner(spec, image_size)
    learner._build(seed=0)
    learner._load_backbone_state(snapshot)
    learner._snapshot = copy.deepcopy(snapshot)
    return learner


def save_checkpoint(learner: Learner, path) -> None:
    """Persist current backbone state and pretrained snapshot."""
    if not learner.has_snapshot:
        raise LifecycleError("cannot checkpoint a learner without a snapshot")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": {
            "kind": learner.spec.kind,
            "filters": learner.spec.filters,
            "stages": learner.spec.stages,
            "lr": learner.spec.lr,
            "fine_tune_steps": learner.spec.fine_tune_steps,
            "output_dim": learner.spec.output_dim,
        },
        "image_size": learner.image_size,
        "current": {name: mod.state_dict() for name, mod in learner._backbone().items()},
        "snapshot": learner._snapshot,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Learner:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if not isinstance(version, int) or version > CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} is newer than supported "
            f"({CHECKPOINT_FORMAT_VERSION})"
        )
    spec = LearnerSpec(**payload["spec"])
    learner = make_learner(spec, payload["image_size"])
    learner._build(seed=0)
    learner._load_backbone_state(payload["current"])
    learner._snapshot = copy.deepcopy(payload["snapshot"])
    return learner
