"""Finite-difference validation of the hand-derived backward pass.

Each trial draws a random architecture, parameter jitter, batch, and loss
(cross-entropy or mean entropy over a random index subset), then compares the
analytic gradient over the norm affine parameters against central finite
differences. Batches are redrawn until every pre-ReLU activation clears a
margin around zero: a probe step of 1e-5 across a ReLU kink would invalidate
the finite-difference oracle itself, not the gradient under test.

Per-coordinate relative error is |a - f| / max(|a|, |f|, 1e-6); the floor
keeps numerically-zero coordinates from amplifying roundoff in the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .model import ArchSpec, LossSpec, backward_trainable, forward, init_model, \
    loss_value_and_dlogits

FD_STEP = 1e-5
REL_TOL = 1e-4
_KINK_MARGIN = 1e-3
_REL_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    trials: int
    max_rel_error: float
    passed: bool


def _draw_trial(gen: np.random.Generator):
    d = int(gen.integers(2, 8))
    depth = int(gen.integers(1, 4))
    hidden = tuple(int(gen.integers(3, 10)) for _ in range(depth))
    classes = int(gen.integers(2, 6))
    n = int(gen.integers(2, 10))
    m = init_model(ArchSpec(d, hidden, classes), seed=int(gen.integers(1 << 31)))

    # Move off the all-ones/all-zeros init so the check runs at a generic point.
    vec = m.trainable_vector()
    m.set_trainable_vector(vec + gen.normal(0.0, 0.25, size=vec.shape))

    for _ in range(100):
        x = gen.normal(0.0, 1.0, size=(n, d))
        cache = forward(m, x, mode="batch")
        margin = min(np.min(np.abs(pn)) for pn in cache.post_norm)
        if margin > _KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not find a batch clear of ReLU kinks")

    subset = int(gen.integers(1, n + 1))
    indices = gen.choice(n, size=subset, replace=False)
    reduction = "mean" if gen.random() < 0.5 else "sum"
    if gen.random() < 0.5:
        labels = gen.integers(0, classes, size=subset)
        spec = LossSpec("cross_entropy", indices, labels, reduction=reduction)
    else:
        spec = LossSpec("entropy", indices, reduction=reduction)
    return m, x, spec


def _fd_gradient(m, x, spec, step: float) -> np.ndarray:
    base = m.trainable_vector()
    grad = np.zeros_like(base)
    for j in range(base.size):
        for sign in (+1.0, -1.0):
            vec = base.copy()
            vec[j] += sign * step
            m.set_trainable_vector(vec)
            value, _ = loss_value_and_dlogits(spec, forward(m, x, mode="batch").logits)
            grad[j] += sign * value
        grad[j] /= 2.0 * step
    m.set_trainable_vector(base)
    return grad


def run_gradcheck(seed: int, trials: int = 200, step: float = FD_STEP,
                  tol: float = REL_TOL, inject_error: float = 0.0) -> GradcheckResult:
    """``inject_error`` perturbs the analytic gradient; it exists purely as a
    negative control so a broken check cannot pass silently."""
    worst = 0.0
    for t in range(trials):
        gen = rng.substream(seed, rng.GRADCHECK, t)
        m, x, spec = _draw_trial(gen)
        cache = forward(m, x, mode="batch")
        analytic = backward_trainable(m, cache, spec)
        if inject_error:
            analytic = analytic + inject_error * gen.normal(size=analytic.shape)
        fd = _fd_gradient(m, x, spec, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), _REL_FLOOR)
        rel = np.max(np.abs(analytic - fd) / denom) if analytic.size else 0.0
        worst = max(worst, float(rel))
    return GradcheckResult(trials=trials, max_rel_error=worst,
                           passed=trials == 0 or worst < tol)
