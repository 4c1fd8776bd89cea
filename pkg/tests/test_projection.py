import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dconrec.projection import project_feasible


def breakpoint_oracle(x, budget):
    """Exact projection by scanning the breakpoints of mu -> sum(clip(x - mu, 0, 1))."""
    x = np.asarray(x, dtype=float)
    if np.clip(x, 0, 1).sum() <= budget:
        return np.clip(x, 0, 1)
    points = np.unique(np.concatenate([x, x - 1, [0.0]]))
    points = points[points >= 0]
    total = lambda mu: np.clip(x - mu, 0, 1).sum()
    # total is nonincreasing and piecewise linear; any breakpoint hitting the budget is optimal
    exact = [p for p in points if abs(total(p) - budget) <= 1e-12]
    if exact:
        return np.clip(x - exact[0], 0, 1)
    lo = max(p for p in points if total(p) > budget)
    hi = min(p for p in points if total(p) < budget)
    t_lo, t_hi = total(lo), total(hi)
    mu = lo + (t_lo - budget) * (hi - lo) / (t_lo - t_hi)
    return np.clip(x - mu, 0, 1)


def kkt_holds(x, p, budget, tol=1e-7):
    """Optimality of p for min ||p - x||^2 over the box-and-budget set."""
    if (p < -tol).any() or (p > 1 + tol).any() or p.sum() > budget + tol:
        return False
    r = x - p
    free = (p > tol) & (p < 1 - tol)
    zero, one = p <= tol, p >= 1 - tol
    if abs(p.sum() - budget) > tol:
        lo = hi = 0.0
    elif free.any():
        lo = hi = float(np.median(r[free]))
    else:
        # no free entry: the multiplier may be anything between the two bound sets
        lo = max(0.0, float(r[zero].max(initial=0.0)))
        hi = float(r[one].min(initial=np.inf))
    if hi < lo - 1e-6 or hi < -tol:
        return False
    mu = min(max(lo, 0.0), hi)
    ok_free = np.all(np.abs(r[free] - mu) <= 1e-6)
    ok_zero = np.all(r[zero] <= mu + 1e-6)
    ok_one = np.all(r[one] >= mu - 1e-6)
    return bool(ok_free and ok_zero and ok_one)


def test_examples():
    assert np.array_equal(project_feasible([0.2, 0.3], 1.0), [0.2, 0.3])
    assert np.array_equal(project_feasible([1.5, -0.2], 2.0), [1.0, 0.0])
    assert np.allclose(project_feasible([0.9, 0.8, 0.7], 1.2), [0.5, 0.4, 0.3], atol=1e-12)
    # the budget is met on a flat stretch of the shift, leaving no free coordinate
    for x, want in (([3.0, 3.0, 1.0], [1, 1, 0]), ([1.0, 2.0, 2.0], [0, 1, 1])):
        p = project_feasible(x, 2.0)
        assert np.array_equal(p, want) and kkt_holds(np.array(x), p, 2.0)


def test_large_magnitudes_stay_within_budget():
    rng = np.random.default_rng(5)
    for scale in (1e2, 1e4, 1e6, 1e9):
        for _ in range(50):
            n = int(rng.integers(100, 5000))
            x = rng.uniform(0, 0.5, n) - scale * rng.normal(size=n) * (rng.random(n) < 0.5)
            budget = float(rng.uniform(1, n / 4))
            p = project_feasible(x, budget)
            assert p.sum() <= budget + 1e-9


def test_nonpositive_budget():
    with pytest.raises(ValueError):
        project_feasible([0.5], 0.0)


def random_case(rng):
    n = int(rng.integers(2, 51))
    scale = rng.choice([0.1, 1.0, 5.0])
    x = rng.normal(0.5, scale, n)
    budget = float(rng.uniform(0.05, n))
    return x, budget


def test_random_feasibility_idempotence_and_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        x, budget = random_case(rng)
        p = project_feasible(x, budget)
        assert (p >= 0).all() and (p <= 1).all() and p.sum() <= budget + 1e-9
        assert np.abs(project_feasible(p, budget) - p).max() <= 1e-12
    for _ in range(500):
        x, budget = random_case(rng)
        p = project_feasible(x, budget)
        assert np.abs(p - breakpoint_oracle(x, budget)).max() <= 1e-9
        assert kkt_holds(x, p, budget)


def test_firm_nonexpansive_and_nonexpansive():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        n = int(rng.integers(2, 51))
        budget = float(rng.uniform(0.05, n))
        u, v = rng.normal(0.5, 2.0, n), rng.normal(0.5, 2.0, n)
        pu, pv = project_feasible(u, budget), project_feasible(v, budget)
        d = pu - pv
        assert d @ d <= (u - v) @ d + 1e-9
        c = project_feasible(rng.uniform(0, 1, n), budget)
        lhs = np.linalg.norm(project_feasible(c + u, budget) - project_feasible(c + v, budget))
        assert lhs <= np.linalg.norm(u - v) + 1e-9


def test_three_dim_grid_oracle():
    rng = np.random.default_rng(2)
    g = np.linspace(0, 1, 201)
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    for _ in range(20):
        x = rng.normal(0.5, 0.8, 3)
        budget = float(rng.uniform(0.1, 2.9))
        p = project_feasible(x, budget)
        assert np.abs(p - breakpoint_oracle(x, budget)).max() <= 1e-6
        feasible = grid[grid.sum(1) <= budget]
        best = ((feasible - x) ** 2).sum(1).min()
        # no grid point beats the projection (grid spacing bounds the slack)
        assert ((p - x) ** 2).sum() <= best + 1e-12


@settings(max_examples=200, deadline=None, derandomize=True)
@given(
    arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50, allow_nan=False)),
    st.floats(1e-3, 40),
)
def test_property_matches_oracle(x, budget):
    p = project_feasible(x, budget)
    assert (p >= 0).all() and (p <= 1).all() and p.sum() <= budget + 1e-9
    assert np.abs(p - breakpoint_oracle(x, budget)).max() <= 1e-8
    assert kkt_holds(x, p, budget)
