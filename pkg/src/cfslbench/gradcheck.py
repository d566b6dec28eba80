"""Finite-difference verification of fine-tuning gradients.

Builds a tiny float64 copy of the convnet, evaluates the same cross-entropy
loss the fine-tuning path uses, and compares autograd gradients against
central differences at randomly chosen parameter coordinates. Batch
normalization runs in eval mode so the loss is a pure function of the
parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .models import CONVNET, LearnerSpec, build_conv_trunk
from .seeding import derive_rng, derive_seed

_CHECK_STREAM = 0x6D

DEFAULT_EPSILON = 1e-5
DEFAULT_THRESHOLD = 1e-4
# Floor sits above central-difference round-off (~1e-11 for an O(1) float64
# loss at eps=1e-5) so zero-gradient coordinates compare on absolute error.
_DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    threshold: float

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error) and self.max_rel_error < self.threshold


def _tiny_spec() -> LearnerSpec:
    return LearnerSpec(kind=CONVNET, filters=4, stages=2, fine_tune_steps=1, output_dim=8)


def finite_difference_check(
    spec: LearnerSpec | None = None,
    image_size: int = 12,
    label_count: int = 3,
    batch_size: int = 4,
    n_params: int = 50,
    epsilon: float = DEFAULT_EPSILON,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central differences on random coordinates.

    Relative error is |fd - ag| / max(|fd|, |ag|, floor); the check passes
    when the worst coordinate stays under the threshold.
    """
    spec = spec or _tiny_spec()
    if spec.kind != CONVNET:
        raise ValueError("gradient checking covers the convnet fine-tuning path")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, _CHECK_STREAM))
        trunk, feat_dim = build_conv_trunk(
            spec.filters, spec.stages, image_size, dtype=torch.float64
        )
        head = nn.Linear(feat_dim, label_count).to(torch.float64)

    rng = derive_rng(seed, _CHECK_STREAM)
    x = torch.from_numpy(
        rng.random((batch_size, 1, image_size, image_size), dtype=np.float64)
    )
    y = torch.from_numpy(rng.integers(0, label_count, size=batch_size))

    trunk.eval()  # frozen batchnorm stats keep the loss a pure function
    head.eval()
    params = [p for p in list(trunk.parameters()) + list(head.parameters())]

    def loss_value() -> torch.Tensor:
        return nn.functional.cross_entropy(head(trunk(x)), y)

    loss = loss_value()
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    n_checked = min(n_params, total)
    flat_coords = rng.choice(total, size=n_checked, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rel_errors = []
    with torch.no_grad():
        for flat in flat_coords:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            ei = int(flat - offsets[pi])
            view = params[pi].view(-1)
            orig = view[ei].item()
            view[ei] = orig + epsilon
            up = loss_value().item()
            view[ei] = orig - epsilon
            down = loss_value().item()
            view[ei] = orig
            fd = (up - down) / (2.0 * epsilon)
            ag = grads[pi].view(-1)[ei].item()
            denom = max(abs(fd), abs(ag), _DENOM_FLOOR)
            rel_errors.append(abs(fd - ag) / denom)

    errs = np.array(rel_errors)
    return GradCheckReport(
        max_rel_error=float(errs.max()),
        mean_rel_error=float(errs.mean()),
        n_checked=n_checked,
        threshold=threshold,
    )
