"""Simplified reference fitting: alternate OU-kernel Sinkhorn couplings and a masked linear refit.

The refit uses the first-order map ``A = (B - I) / dt`` from a ridge
least-squares one-step map ``B`` while the coupling cost keeps the exact
transition mean ``expm(dt A) x + dt b``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .datagen import SnapshotDataset, parse_condition
from .eot import half_sq_cost, sinkhorn_cost
from .numerics import Prng

log = logging.getLogger(__name__)


def expm(M, t: float = 1.0) -> np.ndarray:
    """``exp(t M)`` by scaling-and-squaring with a Pade approximant."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise ValueError("expm needs a finite square matrix")
    with np.errstate(over="ignore", invalid="ignore"):
        out = scipy.linalg.expm(t * M)
    if not np.all(np.isfinite(out)):
        raise OverflowError("matrix exponential overflowed; reduce the norm of t * M")
    return out


def mask_columns(A: np.ndarray, knockout: int | None) -> np.ndarray:
    if knockout is None:
        return A
    out = A.copy()
    out[:, knockout] = 0.0
    return out


@dataclass
class OuModel:
    A: np.ndarray
    b: np.ndarray
    sigma: float
    ridge: float
    iterations: int
    objective: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def drift_matrix(self, knockout: int | None = None) -> np.ndarray:
        return mask_columns(self.A, knockout)


def _ridge_refit(stats, ridge: float, d: int):
    """Solve ``min sum pi_ij |B x_i + c - y_j|^2 + ridge |B - I|^2`` for ``(B, c)``."""
    zz, zy = stats
    reg = np.diag(np.r_[np.full(d, ridge), 0.0])
    prior = np.vstack([np.eye(d), np.zeros((1, d))])
    while True:
        try:
            theta = np.linalg.solve(zz + reg, zy + reg @ prior)
            break
        except np.linalg.LinAlgError:
            ridge = max(ridge * 10, 1e-8)
            reg = np.diag(np.r_[np.full(d, ridge), 1e-8])
            log.warning("singular normal equations; increasing ridge to %g", ridge)
    return theta[:d].T, theta[d]


def fit_reference(dataset: SnapshotDataset, sigma: float, ridge: float = 1e-3, outer_iters: int = 10,
                  sinkhorn_iters: int = 1000, sinkhorn_tol: float = 1e-6, dt: float = 1.0) -> OuModel:
    d = dataset.d
    views = []
    for cond in dataset.conditions:
        times = dataset.available(cond)
        if len(times) < 2:
            log.warning("condition %s has fewer than 2 marginals; skipped", cond)
            continue
        pairs = [(dataset.get(cond, ta), dataset.get(cond, tb)) for ta, tb in zip(times[:-1], times[1:])]
        views.append((parse_condition(cond), pairs))
    if not views:
        raise ValueError("dataset needs a condition with at least two timepoints")
    A = np.zeros((d, d))
    b = np.zeros(d)
    objective = []
    for _ in range(outer_iters):
        A_sum = np.zeros((d, d))
        A_cnt = np.zeros((d, d))
        b_sum = np.zeros(d)
        total = 0.0
        for ko, pairs in views:
            ref = expm(mask_columns(A, ko), dt)
            zz = np.zeros((d + 1, d + 1))
            zy = np.zeros((d + 1, d))
            plans = []
            for x0, x1 in pairs:
                mean = x0 @ ref.T + dt * b
                plan = sinkhorn_cost(half_sq_cost(mean, x1), sigma ** 2,
                                     max_iter=sinkhorn_iters, tol=sinkhorn_tol).plan
                z = np.hstack([x0, np.ones((len(x0), 1))])
                zz += (z * plan.sum(axis=1)[:, None]).T @ z
                zy += z.T @ (plan @ x1)
                plans.append(plan)
            B, c = _ridge_refit((zz, zy), ridge, d)
            for (x0, x1), plan in zip(pairs, plans):
                resid = (x0 @ B.T + c)[:, None, :] - x1[None, :, :]
                total += float((plan * np.einsum("ijk,ijk->ij", resid, resid)).sum())
            total += ridge * float(np.sum((B - np.eye(d)) ** 2))
            A_view = (B - np.eye(d)) / dt
            seen = np.ones((d, d))
            if ko is not None:
                A_view[:, ko] = 0.0
                seen[:, ko] = 0.0
            A_sum += A_view * seen
            A_cnt += seen
            b_sum += c / dt
        A = np.divide(A_sum, A_cnt, out=np.zeros((d, d)), where=A_cnt > 0)
        b = b_sum / len(views)
        objective.append(total)
    return OuModel(A, b, sigma, ridge, outer_iters, objective)


def ou_graph(model: OuModel) -> np.ndarray:
    """Edge scores ``|A|`` with the diagonal zeroed."""
    G = np.abs(model.A)
    np.fill_diagonal(G, 0.0)
    return G


def ou_rollout(model: OuModel, x0, segment: int = 0, mode: str = "ode", knockout: int | None = None,
               steps: int = 100, prng: Prng | None = None, t_end: float = 1.0, clamp: bool = True) -> np.ndarray:
    """Euler (or Euler-Maruyama with ``mode='sde'``) on the linear drift ``A x + b``."""
    if mode not in ("ode", "sde"):
        raise ValueError(f"mode must be 'ode' or 'sde', got {mode!r}")
    M_t = model.drift_matrix(knockout).T
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    noise = model.sigma * np.sqrt(h) if mode == "sde" else 0.0
    prng = prng or Prng(0)
    for step in range(int(round(t_end * steps))):
        x += h * (x @ M_t + model.b)
        if noise:
            x += noise * prng.normal(x.shape)
        if clamp and knockout is not None:
            x[:, knockout] = 0.0
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at rollout step {step}")
    return x
