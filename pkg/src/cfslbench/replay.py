"""Replay buffer for fine-tuning: a small FIFO memory of past support sets.

Mimicking hippocampal replay at desk scale: while a learner fine-tunes on
the current support set, a handful of items remembered from earlier support
sets in the same task are mixed into every gradient step. The buffer holds
whole support sets, first-in-first-out with capacity b sets, and k items
are redrawn from the pooled contents for each step.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .episodes import ExperimentConfig, SupportSet, TaskItem


class ReplayError(RuntimeError):
    """Replay was configured or used incorrectly."""


class ReplayNotApplicableError(ReplayError):
    """The experiment has no earlier support sets to replay from."""


@dataclass(frozen=True)
class ReplayConfig:
    """Capacity b (in support sets) and per-step draw count k (in items)."""

    b: int
    k: int

    def __post_init__(self) -> None:
        if self.b < 1:
            raise ValueError("buffer capacity b must be >= 1")
        if self.k < 0:
            raise ValueError("draw count k must be >= 0")


def ensure_replay_applicable(config: ExperimentConfig) -> None:
    """Reject replay for streams where no earlier support set can exist."""
    if config.nss < 2:
        raise ReplayNotApplicableError(
            "replay requires NSS > 1: with a single support set there is "
            "nothing earlier to replay"
        )


class ReplayBuffer:
    """Fixed-capacity FIFO store of support sets.

    Inserting past capacity evicts the oldest set. Sampling pools the items
    of every stored set and never mutates the buffer; each call draws
    fresh, uniformly and without replacement when the pool holds at least
    k items, with replacement otherwise.
    """

    def __init__(self, config: ReplayConfig):
        self.config = config
        self._slots: deque[tuple[TaskItem, ...]] = deque(maxlen=config.b)

    def __len__(self) -> int:
        """Number of stored support sets."""
        return len(self._slots)

    @property
    def capacity(self) -> int:
        return self.config.b

    @property
    def item_count(self) -> int:
        return sum(len(slot) for slot in self._slots)

    def insert(self, support: SupportSet | Iterable[TaskItem]) -> None:
        """Append one support set; stored items are immutable copies."""
        items = support.items if isinstance(support, SupportSet) else support
        slot = []
        for it in items:
            image = np.array(it.image, dtype=np.float32, copy=True)
            image.setflags(write=False)
            slot.append(
                TaskItem(
                    image=image,
                    label=int(it.label),
                    class_id=it.class_id,
                    sample_id=it.sample_id,
                )
            )
        if not slot:
            raise ReplayError("cannot insert an empty support set")
        self._slots.append(tuple(slot))

    def pooled_items(self) -> list[TaskItem]:
        """All stored items, oldest set first, order within sets preserved."""
        return [it for slot in self._slots for it in slot]

    def sample(self, k: int, rng: np.random.Generator) -> list[TaskItem]:
        if k == 0:
            return []
        pool = self.pooled_items()
        if not pool:
            raise ReplayError("cannot sample from an empty replay buffer")
        idx = rng.choice(len(pool), size=k, replace=k > len(pool))
        return [pool[int(i)] for i in idx]

    def clear(self) -> None:
        self._slots.clear()

    def dump(self) -> list[list[dict]]:
        """Buffer contents oldest to newest, as manifest-style records."""
        return [
            [
                {"label": it.label, "class_id": it.class_id, "sample_id": it.sample_id}
                for it in slot
            ]
            for slot in self._slots
        ]


def adapt_with_replay(
    learner,
    support_set: SupportSet | Sequence[TaskItem],
    buffer: ReplayBuffer,
    rng: np.random.Generator,
) -> list[float]:
    """Fine-tune on a support set with replayed items mixed into every step.

    The support set enters the buffer before training starts, so the first
    support set of a task trains against draws from itself. Each gradient
    step redraws k items and appends them to the full support batch.
    """
    if not hasattr(learner, "fine_tune_step"):
        raise ReplayError("replay fine-tuning requires a gradient-trainable learner")
    items = list(support_set.items if isinstance(support_set, SupportSet) else support_set)
    if not items:
        raise ReplayError("support set is empty")
    buffer.insert(items)
    losses: list[float] = []
    for _ in range(learner.spec.fine_tune_steps):
        drawn = buffer.sample(buffer.config.k, rng)
        batch = items + drawn
        losses.append(
            learner.fine_tune_step([it.image for it in batch], [it.label for it in batch])
        )
    return losses
