"""Entropic optimal transport (log-domain Sinkhorn) and exact assignment-based OT."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .numerics import Prng

log = logging.getLogger(__name__)

EXACT_OT_CAP = 512


@dataclass
class Coupling:
    plan: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray
    epsilon: float
    converged: bool = True
    iterations: int = 0
    violation: float = 0.0
    _cdf: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.plan.shape

    def marginal_violation(self) -> float:
        rows = np.abs(self.plan.sum(axis=1) - self.source_weights).max()
        cols = np.abs(self.plan.sum(axis=0) - self.target_weights).max()
        return float(max(rows, cols))

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            c = np.cumsum(self.plan.ravel())
            self._cdf = c / c[-1]
        return self._cdf


def half_sq_cost(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    return 0.5 * cdist(np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64), "sqeuclidean")


def sinkhorn_cost(cost: np.ndarray, epsilon: float, a=None, b=None,
                  max_iter: int = 1000, tol: float = 1e-6, scaling: float = 0.5) -> Coupling:
    """Log-domain Sinkhorn for ``min <pi, cost> + epsilon KL(pi | a x b)``.

    Uses epsilon-scaling: the regularization starts near the cost range and is
    divided by ``1 / scaling`` per stage, warm-starting the dual potentials,
    until it reaches ``epsilon``. The final stage iterates until the l1
    row-marginal violation (columns are exact after each sweep) drops below
    ``tol``. ``max_iter`` bounds the final stage; ``converged=False`` is
    reported if it is exhausted.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    n, m = cost.shape
    if n < 1 or m < 1:
        raise ValueError("empty marginal")
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)
    log_a, log_b = np.log(a), np.log(b)
    schedule = [epsilon]
    if 0 < scaling < 1:
        top = float(cost.max() - cost.min())
        while schedule[-1] < top:
            schedule.append(schedule[-1] / scaling)
        schedule.reverse()
    # dual potentials in cost units
    F = np.zeros(n)
    G = np.zeros(m)
    total = 0
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        neg_k = -cost / eps
        stage_tol = tol if final else max(tol, 1e-3)
        budget = max_iter if final else 50
        converged = False
        violation = np.inf
        f = F / eps
        for _ in range(budget):
            total += 1
            g = -logsumexp(neg_k + (log_a + f)[:, None], axis=0)
            lse_rows = logsumexp(neg_k + (log_b + g)[None, :], axis=1)
            violation = float(np.abs(a * np.expm1(f + lse_rows)).sum())
            if violation < stage_tol:
                converged = True
                break
            f = -lse_rows
        F, G = f * eps, g * eps
    if not converged:
        log.warning("Sinkhorn did not converge in %d iterations (violation %.3g)", max_iter, violation)
    plan = np.exp(neg_k + (log_a + f)[:, None] + (log_b + g)[None, :])
    return Coupling(plan, a, b, float(epsilon), converged, total, violation)


def sinkhorn(x0: np.ndarray, x1: np.ndarray, epsilon: float, max_iter: int = 1000,
             tol: float = 1e-6) -> Coupling:
    """Entropic OT between uniform empirical measures with cost ``|x - y|^2 / 2``."""
    return sinkhorn_cost(half_sq_cost(x0, x1), epsilon, max_iter=max_iter, tol=tol)


def transport_cost(coupling: Coupling, x0: np.ndarray, x1: np.ndarray) -> float:
    """``E_pi |x - y|^2`` under the (normalized) plan."""
    plan = coupling.plan / coupling.plan.sum()
    return float((plan * cdist(x0, x1, "sqeuclidean")).sum())


def sample_pairs(coupling: Coupling, prng: Prng, batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch`` index pairs i.i.d. with probability proportional to the plan."""
    cdf = coupling.cdf()
    u = prng.random(batch)
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    m = coupling.plan.shape[1]
    return flat // m, flat % m


def exact_ot(x0: np.ndarray, x1: np.ndarray, cap: int = EXACT_OT_CAP) -> tuple[float, np.ndarray]:
    """Minimum mean squared-Euclidean matching cost between equal-size clouds.

    Returns ``(cost, assignment)`` where ``x0[i]`` is matched to ``x1[assignment[i]]``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n = x0.shape[0]
    if x1.shape[0] != n:
        raise ValueError(f"exact_ot needs equal-size clouds, got {n} and {x1.shape[0]}")
    if n > cap:
        raise ValueError(f"{n} points exceed the exact OT cap of {cap}; subsample both clouds first")
    cost = cdist(x0, x1, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(n, dtype=np.intp)
    assignment[rows] = cols
    return float(cost[rows, cols].sum() / n), assignment
