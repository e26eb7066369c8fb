import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structureflow.eot import exact_ot, half_sq_cost, sample_pairs, sinkhorn, sinkhorn_cost, transport_cost
from structureflow.numerics import Prng


def brute_force_cost(x0, x1):
    n = len(x0)
    c = ((x0[:, None, :] - x1[None, :, :]) ** 2).sum(-1)
    return min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


def two_point_fixed_point(eps):
    """Closed form of the entropic plan for cost [[0,1],[1,0]] with uniform marginals."""
    q = np.exp(-1 / eps)
    off = 0.5 * q / (1 + q)
    return np.array([[0.5 - off, off], [off, 0.5 - off]])


def test_two_by_two_closed_form():
    c = sinkhorn_cost(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.05)
    assert np.allclose(c.plan, np.diag([0.5, 0.5]), atol=1e-3)
    for eps in (0.05, 0.5, 2.0):
        c = sinkhorn_cost(np.array([[0.0, 1.0], [1.0, 0.0]]), eps, tol=1e-12, max_iter=5000)
        assert np.allclose(c.plan, two_point_fixed_point(eps), atol=1e-10)


def test_zero_cost_gives_outer_product():
    x = np.zeros((4, 2))
    c = sinkhorn(x, x, 0.1)
    assert np.allclose(c.plan, np.full((4, 4), 1 / 16), atol=1e-12)


def test_marginals_and_transpose_symmetry():
    prng = Prng(1)
    x0 = prng.normal((30, 3))
    x1 = prng.normal((25, 3)) + 1
    c = sinkhorn(x0, x1, 0.5, tol=1e-10, max_iter=5000)
    assert c.converged and c.marginal_violation() < 1e-9
    assert np.allclose(c.plan.sum(1), 1 / 30) and np.allclose(c.plan.sum(0), 1 / 25)
    ct = sinkhorn(x1, x0, 0.5, tol=1e-10, max_iter=5000)
    assert np.abs(ct.plan.T - c.plan).max() < 1e-8


def test_plan_approaches_product_as_epsilon_grows():
    prng = Prng(2)
    x0, x1 = prng.normal((12, 2)), prng.normal((12, 2))
    prod = np.full((12, 12), 1 / 144)
    gaps = [np.abs(sinkhorn(x0, x1, e, tol=1e-10).plan - prod).max() for e in (0.1, 1.0, 10.0)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_entropic_cost_approaches_exact_ot():
    prng = Prng(3)
    x0, x1 = prng.normal((6, 2)), prng.normal((6, 2))
    exact = brute_force_cost(x0, x1)
    c = sinkhorn(x0, x1, 1e-3, tol=1e-9, max_iter=20000)
    assert transport_cost(c, x0, x1) == pytest.approx(exact, abs=5e-3)


def test_nan_cost_rejected():
    cost = np.ones((2, 2))
    cost[0, 1] = np.nan
    with pytest.raises(ValueError):
        sinkhorn_cost(cost, 0.1)


def test_non_convergence_flagged(caplog):
    prng = Prng(4)
    c = sinkhorn(prng.normal((40, 2)), prng.normal((40, 2)) * 3, 1e-3, max_iter=2, tol=1e-14)
    assert not c.converged and np.isfinite(c.plan).all()
    assert "did not converge" in caplog.text


def test_sample_pairs_identity_plan():
    c = sinkhorn(np.eye(5) * 10, np.eye(5) * 10, 1e-2)
    i, j = sample_pairs(c, Prng(5), 500)
    assert np.array_equal(i, j)


def test_sample_pairs_frequencies():
    plan = np.array([[0.1, 0.2], [0.3, 0.4]])
    from structureflow.eot import Coupling
    c = Coupling(plan, plan.sum(1), plan.sum(0), 1.0, True, 0, 0.0)
    n = 100_000
    i, j = sample_pairs(c, Prng(6), n)
    freq = np.zeros((2, 2))
    np.add.at(freq, (i, j), 1)
    freq /= n
    se = np.sqrt(plan * (1 - plan) / n)
    assert np.all(np.abs(freq - plan) < 4 * se)


def test_exact_ot_examples():
    x = Prng(7).normal((5, 3))
    cost, perm = exact_ot(x, x)
    assert cost == 0 and np.array_equal(perm, np.arange(5))
    a, b = np.array([[1.0, 2.0]]), np.array([[4.0, -2.0]])
    assert exact_ot(a, b)[0] == pytest.approx(25.0)


def test_exact_ot_cap_and_size_errors():
    with pytest.raises(ValueError, match="subsample"):
        exact_ot(np.zeros((6, 1)), np.zeros((6, 1)), cap=5)
    with pytest.raises(ValueError):
        exact_ot(np.zeros((3, 1)), np.zeros((4, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10_000))
def test_exact_ot_matches_permutation_brute_force(n, d, seed):
    prng = Prng(seed)
    x0, x1 = prng.normal((n, d)), prng.normal((n, d))
    assert abs(exact_ot(x0, x1)[0] - brute_force_cost(x0, x1)) < 1e-9


def test_half_sq_cost():
    assert np.allclose(half_sq_cost(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])), 12.5)


def test_exact_cost_below_entropic_cost():
    prng = Prng(8)
    for _ in range(5):
        x0, x1 = prng.normal((8, 2)), prng.normal((8, 2))
        c = sinkhorn(x0, x1, 0.3, tol=1e-10)
        assert exact_ot(x0, x1)[0] <= transport_cost(c, x0, x1) + 1e-12


def test_plan_nonnegative_with_unit_mass():
    prng = Prng(9)
    c = sinkhorn(prng.normal((15, 3)), prng.normal((11, 3)), 0.2)
    assert np.all(c.plan >= 0) and c.plan.sum() == pytest.approx(1.0)
