"""Deterministic episode streams for continual few-shot evaluation.

An experiment is fully described by four numbers: how many support sets are
presented (nss), how many consecutive sets share one class block (cci), how
many classes each set carries (n_way), and how many samples per class appear
in a set (k_shot). Classification streams introduce a fresh class block every
cci sets; instance streams present distinct exemplars of a single class, one
exemplar per label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .datasets import ClassDataset
from .seeding import derive_rng

CLASSIFICATION = "classification"
INSTANCE = "instance"

_TASK_STREAM = 0x7A


class ConfigError(ValueError):
    """An experiment parameterization violates its own constraints."""


class SamplingError(RuntimeError):
    """The dataset cannot supply a task without reusing samples."""


class PresetError(LookupError):
    """Unknown preset name."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete parameterization of one experiment."""

    nss: int
    cci: int
    n_way: int
    k_shot: int
    mode: str = CLASSIFICATION
    num_tasks: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(self.seeds))
        problems = []
        for name in ("nss", "cci", "n_way", "k_shot", "num_tasks"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.mode not in (CLASSIFICATION, INSTANCE):
            problems.append(f"mode must be '{CLASSIFICATION}' or '{INSTANCE}', got {self.mode!r}")
        if self.cci >= 1 and self.nss >= 1 and self.nss % self.cci != 0:
            problems.append(f"cci ({self.cci}) must divide nss ({self.nss})")
        if self.mode == INSTANCE:
            if self.n_way != 1:
                problems.append("instance mode requires n_way = 1")
            if self.cci != self.nss:
                problems.append("instance mode requires cci = nss")
        if not self.seeds:
            problems.append("seeds must be nonempty")
        if problems:
            raise ConfigError("; ".join(problems))


def derive_counts(config: ExperimentConfig) -> tuple[int, int]:
    """Return (label_count, support samples per label).

    Classification: label_count = n_way * nss / cci and every class shows
    cci * k_shot support samples. Instance: one label per exemplar,
    label_count = nss * k_shot, each shown exactly once.
    """
    if config.mode == INSTANCE:
        return config.nss * config.k_shot, 1
    return config.n_way * config.nss // config.cci, config.cci * config.k_shot


@dataclass(frozen=True)
class TaskItem:
    image: np.ndarray
    label: int
    class_id: str
    sample_id: str


@dataclass(frozen=True)
class SupportSet:
    index: int
    items: tuple[TaskItem, ...]

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(it.label for it in self.items)


@dataclass(frozen=True)
class Task:
    """One trial: an ordered support-set stream plus a held-out target set."""

    support_sets: tuple[SupportSet, ...]
    target_set: tuple[TaskItem, ...]
    label_count: int
    mode: str


def sample_task(
    eval_data: ClassDataset, config: ExperimentConfig, rng: np.random.Generator
) -> Task:
    """Draw one task from the evaluation classes.

    Classification: label_count distinct classes are drawn without
    replacement and bound to labels in block order; block b (support sets
    [b*cci, (b+1)*cci)) owns labels [b*n_way, (b+1)*n_way), and the binding
    never changes within the block. Each class contributes k_shot fresh
    samples to each of its cci sets plus one held-out target sample.

    Instance: one class is drawn; nss * k_shot of its samples become
    labels 0..NI-1, each appearing in exactly one support set, and the
    target set repeats the identical images.

    Deterministic given the rng state. Raises SamplingError when the dataset
    cannot cover the draw without sample reuse.
    """
    label_count, _ = derive_counts(config)
    classes = eval_data.classes

    if config.mode == INSTANCE:
        ni = label_count
        if not classes:
            raise SamplingError("evaluation dataset has no classes")
        cls = classes[int(rng.integers(len(classes)))]
        if len(cls.samples) < ni:
            raise SamplingError(
                f"instance task needs {ni} samples but class '{cls.class_id}' has "
                f"{len(cls.samples)}"
            )
        picks = rng.choice(len(cls.samples), size=ni, replace=False)
        instances = [
            TaskItem(
                image=cls.samples[int(j)].image,
                label=lab,
                class_id=cls.class_id,
                sample_id=cls.samples[int(j)].sample_id,
            )
            for lab, j in enumerate(picks)
        ]
        support_sets = tuple(
            SupportSet(
                index=i,
                items=tuple(instances[i * config.k_shot : (i + 1) * config.k_shot]),
            )
            for i in range(config.nss)
        )
        return Task(
            support_sets=support_sets,
            target_set=tuple(instances),
            label_count=ni,
            mode=INSTANCE,
        )

    # Classification.
    need_per_class = config.cci * config.k_shot + 1  # support draws plus one target
    if len(classes) < label_count:
        raise SamplingError(
            f"task needs {label_count} classes but evaluation dataset has {len(classes)}"
        )
    class_idx = rng.choice(len(classes), size=label_count, replace=False)

    support_chunks: list[list[TaskItem]] = []  # per label, per set-offset chunk
    targets: list[TaskItem] = []
    for label, ci in enumerate(class_idx):
        cls = classes[int(ci)]
        if len(cls.samples) < need_per_class:
            raise SamplingError(
                f"class '{cls.class_id}' has {len(cls.samples)} samples but the task "
                f"needs {need_per_class} (cci*k_shot support draws plus one target)"
            )
        picks = rng.choice(len(cls.samples), size=need_per_class, replace=False)
        chunk = [
            TaskItem(
                image=cls.samples[int(j)].image,
                label=label,
                class_id=cls.class_id,
                sample_id=cls.samples[int(j)].sample_id,
            )
            for j in picks
        ]
        support_chunks.append(chunk[:-1])
        targets.append(chunk[-1])

    support_sets = []
    for i in range(config.nss):
        block, offset = divmod(i, config.cci)
        items: list[TaskItem] = []
        for label in range(block * config.n_way, (block + 1) * config.n_way):
            start = offset * config.k_shot
            items.extend(support_chunks[label][start : start + config.k_shot])
        support_sets.append(SupportSet(index=i, items=tuple(items)))

    return Task(
        support_sets=tuple(support_sets),
        target_set=tuple(targets),
        label_count=label_count,
        mode=CLASSIFICATION,
    )


def task_stream(
    eval_data: ClassDataset, config: ExperimentConfig, master_seed: int
) -> Iterator[Task]:
    """Yield config.num_tasks tasks, each from its own derived stream.

    Task t is a pure function of (config, master_seed, t), so streams can be
    regenerated or parallelized without changing results.
    """
    for t in range(config.num_tasks):
        yield sample_task(eval_data, config, derive_rng(master_seed, _TASK_STREAM, t))


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def _item_key(item: TaskItem) -> tuple[str, str]:
    return (item.class_id, item.sample_id)


def validate_task(task: Task, config: ExperimentConfig) -> ValidationReport:
    """Check every structural invariant of a task.

    Violations are returned as data rather than raised, so the check can be
    used both as a regression guard and as a triage tool on stored manifests.
    """
    v: list[str] = []
    label_count, _ = derive_counts(config)

    if len(task.support_sets) != config.nss:
        v.append(f"expected {config.nss} support sets, found {len(task.support_sets)}")
    if task.label_count != label_count:
        v.append(f"label_count {task.label_count} does not match derived {label_count}")
    if task.mode != config.mode:
        v.append(f"task mode {task.mode!r} does not match config mode {config.mode!r}")

    expected_size = config.n_way * config.k_shot
    for ss in task.support_sets:
        if len(ss.items) != expected_size:
            v.append(f"support set {ss.index} has {len(ss.items)} items, expected {expected_size}")

    support_items = [it for ss in task.support_sets for it in ss.items]
    seen_labels = {it.label for it in support_items}
    if seen_labels != set(range(label_count)):
        v.append(
            f"support labels {sorted(seen_labels)} do not cover 0..{label_count - 1} exactly"
        )

    # Label/class binding must be one-to-one and stable across the task.
    # Instance mode is exempt: there one class legitimately owns every label,
    # and per-instance identity is checked below instead.
    if config.mode == CLASSIFICATION:
        label_to_class: dict[int, set[str]] = {}
        class_to_label: dict[str, set[int]] = {}
        for it in support_items:
            label_to_class.setdefault(it.label, set()).add(it.class_id)
            class_to_label.setdefault(it.class_id, set()).add(it.label)
        if any(len(cids) > 1 for cids in label_to_class.values()) or any(
            len(labs) > 1 for labs in class_to_label.values()
        ):
            v.append("inconsistent class-to-label binding")

    # Target coverage: exactly one item per label.
    target_labels = sorted(it.label for it in task.target_set)
    if target_labels != list(range(label_count)):
        v.append("missing target label" if len(set(target_labels)) < label_count else
                 f"target labels {target_labels} are not exactly 0..{label_count - 1}")

    if config.mode == INSTANCE:
        class_ids = {it.class_id for it in support_items} | {
            it.class_id for it in task.target_set
        }
        if len(class_ids) > 1:
            v.append(f"instance task spans multiple classes: {sorted(class_ids)}")
        # Each instance appears exactly once across all support sets.
        keys = [_item_key(it) for it in support_items]
        if len(set(keys)) != len(keys):
            v.append("sample reuse")
        by_label = {it.label: it for it in support_items}
        for t_it in task.target_set:
            s_it = by_label.get(t_it.label)
            if s_it is None:
                continue
            if _item_key(s_it) != _item_key(t_it) or not np.array_equal(s_it.image, t_it.image):
                v.append(f"target for instance {t_it.label} differs from its stored exemplar")
    else:
        # Per-label presentation schedule: k_shot fresh samples in each of the
        # cci sets of its own block, and nowhere else.
        sets_by_label: dict[int, dict[int, int]] = {}
        for ss in task.support_sets:
            for it in ss.items:
                sets_by_label.setdefault(it.label, {}).setdefault(ss.index, 0)
                sets_by_label[it.label][ss.index] += 1
        for label, per_set in sorted(sets_by_label.items()):
            block = label // config.n_way
            expected_sets = set(range(block * config.cci, (block + 1) * config.cci))
            if set(per_set) != expected_sets:
                v.append(
                    f"label {label} appears in sets {sorted(per_set)} instead of its "
                    f"block {sorted(expected_sets)}"
                )
            elif any(count != config.k_shot for count in per_set.values()):
                v.append(f"label {label} does not show k_shot={config.k_shot} samples per set")
        # No sample may appear twice anywhere, support or target.
        keys = [_item_key(it) for it in support_items] + [
            _item_key(it) for it in task.target_set
        ]
        if len(set(keys)) != len(keys):
            v.append("sample reuse")

    return ValidationReport(ok=not v, violations=v)


def task_record(task: Task) -> dict:
    """Manifest form of a task: ids and labels only, no pixel data."""
    return {
        "mode": task.mode,
        "label_count": task.label_count,
        "support_sets": [
            {
                "index": ss.index,
                "items": [
                    {"class_id": it.class_id, "sample_id": it.sample_id, "label": it.label}
                    for it in ss.items
                ],
            }
            for ss in task.support_sets
        ],
        "target_set": [
            {"class_id": it.class_id, "sample_id": it.sample_id, "label": it.label}
            for it in task.target_set
        ],
    }


def config_record(config: ExperimentConfig) -> dict:
    return {
        "nss": config.nss,
        "cci": config.cci,
        "n_way": config.n_way,
        "k_shot": config.k_shot,
        "mode": config.mode,
        "num_tasks": config.num_tasks,
        "seeds": list(config.seeds),
    }


def write_task_manifest(
    path: str | Path, config: ExperimentConfig, tasks: Iterator[Task] | list[Task]
) -> Path:
    """Persist a task stream for audit or cross-run comparison."""
    doc = {
        "schema_version": 1,
        "config": config_record(config),
        "tasks": [task_record(t) for t in tasks],
    }
    out = Path(path)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out


def read_task_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
