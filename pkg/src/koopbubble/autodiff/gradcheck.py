from __future__ import annotations

import numpy as np

from .tensor import backward, no_grad, trace_branches


def _same_region(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _eval(f):
    with trace_branches() as log:
        val = f().item()
    return val, log


def numerical_gradient(f, p, index, h: float = 1e-6, shrink: int = 3) -> float:
    """Central difference of scalar ``f()`` with respect to ``p.data[index]``.

    The step is ``h * max(1, |p|)``.  If a ReLU or pooling decision flips
    inside the stencil the difference straddles a kink, so the step shrinks by
    10x up to ``shrink`` times; if both sides still leave the base point's
    linear region, a one-sided difference on the side that stays inside is used.
    """
    orig = p.data[index]
    with no_grad():
        f0, base = _eval(f)
        step = h * max(1.0, abs(orig))
        try:
            for attempt in range(shrink + 1):
                p.data[index] = orig + step
                fp, lp = _eval(f)
                p.data[index] = orig - step
                fm, lm = _eval(f)
                up, down = _same_region(lp, base), _same_region(lm, base)
                if up and down or attempt == shrink:
                    break
                step /= 10.0
        finally:
            p.data[index] = orig
    if up and not down:
        return (fp - f0) / step
    if down and not up:
        return (f0 - fm) / step
    return (fp - fm) / (2.0 * step)


def gradient_check(f, params, h: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative disagreement between backprop and finite differences.

    ``f`` rebuilds the scalar loss from scratch on every call.  For each
    tensor the error is ``max|analytic - numeric|`` over the checked entries,
    divided by the larger of the two max-magnitudes; the worst tensor wins.
    ``max_entries`` samples that many entries per tensor instead of all.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            flat = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        a = np.empty(len(flat))
        n = np.empty(len(flat))
        for j, k in enumerate(flat):
            idx = np.unravel_index(k, p.data.shape)
            a[j] = analytic[idx]
            n[j] = numerical_gradient(f, p, idx, h)
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst
