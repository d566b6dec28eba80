"""Derivation of independent, reproducible random streams from integer keys.

Every stochastic step in the pipeline (dataset synthesis, splits, task
sampling, pretraining batches, replay draws) owns a stream derived from a
key tuple, so results are a pure function of the configured seeds and never
depend on call order.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_rng(*keys: int) -> np.random.Generator:
    """Return a Generator keyed by the given integers.

    Equal key tuples yield identical streams; distinct tuples yield
    statistically independent ones. Negative keys are folded into the
    unsigned 64-bit range.
    """
    return np.random.default_rng([int(k) & _MASK64 for k in keys])


def derive_seed(*keys: int) -> int:
    """Collapse a key tuple to a single non-negative 63-bit integer seed."""
    ss = np.random.SeedSequence([int(k) & _MASK64 for k in keys])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
