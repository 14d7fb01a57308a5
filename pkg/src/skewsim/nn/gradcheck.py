"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def grad_check(
    model,
    x,
    y,
    weight_decay: float = 0.0,
    eps: float = 1e-6,
    per_segment: int = 8,
    seed: int = 0,
    grad_fn=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``per_segment`` coordinates from every parameter segment so a bug
    confined to one layer cannot hide. Each coordinate's error is measured
    against max(|analytic|, |numeric|) floored at a thousandth of the largest
    sampled gradient, so coordinates whose true gradient is ~0 do not report
    pure rounding noise as relative error. ``grad_fn`` overrides the analytic
    gradient (used by tests that plant a fault on purpose). Requires a 64-bit
    model; in 32-bit the finite differences drown in rounding noise.
    """
    if model.dtype != np.float64:
        raise ShapeError("grad_check requires a float64 model")

    def loss_at():
        _, loss, _ = model.loss_and_grad(x, y, weight_decay=weight_decay)
        return loss

    if grad_fn is None:
        grad = model.loss_and_grad(x, y, weight_decay=weight_decay)[0]
    else:
        grad = grad_fn(model, x, y, weight_decay)

    rng = np.random.default_rng(seed)
    flat = model.params.data
    pairs = []
    for seg in model.params.segments:
        count = min(per_segment, seg.size)
        picks = rng.choice(seg.size, size=count, replace=False)
        for p in np.sort(picks):
            i = seg.offset + int(p)
            orig = flat[i]
            flat[i] = orig + eps
            loss_plus = loss_at()
            flat[i] = orig - eps
            loss_minus = loss_at()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            pairs.append((float(grad.data[i]), numeric))
    scale = max((max(abs(a), abs(n)) for a, n in pairs), default=0.0)
    worst = 0.0
    for analytic, numeric in pairs:
        denom = max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-12)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
