"""Euclidean projection onto the capped simplex {x : 0 <= x <= 1, sum(x) <= budget}."""

from __future__ import annotations

import numpy as np


def project_feasible(values, budget: float, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Closest point of the box-and-budget set to ``values``.

    When clipping to [0, 1] already satisfies the budget that is the answer.
    Otherwise the budget constraint is active and the solution is
    ``clip(values - mu, 0, 1)`` with ``mu > 0``; ``mu`` is bracketed by
    bisection and then solved exactly on the resulting free set.
    """
    x = np.asarray(values, dtype=float)
    if budget <= 0:
        raise ValueError("budget must be positive")
    clipped = np.clip(x, 0.0, 1.0)
    if clipped.sum() <= budget:
        return clipped

    lo, hi = 0.0, float(x.max())
    for _ in range(max_iter):
        mu = 0.5 * (lo + hi)
        total = np.clip(x - mu, 0.0, 1.0).sum()
        if abs(total - budget) <= tol:
            break
        if total > budget:
            lo = mu
        else:
            hi = mu
    # sum(clip(x - mu)) is piecewise linear in mu: solve it exactly on the
    # segment the bisection landed on
    shifted = x - mu
    free = (shifted > 0.0) & (shifted < 1.0)
    n_free = int(free.sum())
    best = np.clip(shifted, 0.0, 1.0)
    if n_free:
        n_capped = int((shifted >= 1.0).sum())
        exact = (x[free].sum() + n_capped - budget) / n_free
        # for large |x| the sum above carries rounding error; refine mu from
        # the residual of the clipped values, which are small and sum accurately
        for _ in range(3):
            candidate = np.clip(x - exact, 0.0, 1.0)
            residual = candidate.sum() - budget
            if abs(residual) < abs(best.sum() - budget):
                best = candidate
            inner = int(((candidate > 0.0) & (candidate < 1.0)).sum())
            if residual == 0.0 or inner == 0:
                break
            exact += residual / inner
    # mu itself is only resolved to ulp(|x|); shave what is left off the free entries
    for _ in range(3):
        excess = best.sum() - budget
        inner = (best > 0.0) & (best < 1.0)
        if excess <= 0.0 or not inner.any():
            break
        best[inner] = np.maximum(best[inner] - excess / inner.sum(), 0.0)
    return best
