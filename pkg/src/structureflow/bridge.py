"""Brownian-bridge training targets between entropically coupled snapshot pairs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .eot import Coupling, sample_pairs, sinkhorn
from .numerics import Prng

log = logging.getLogger(__name__)

T_FLOOR = 1e-8


def sample_bridge_point(x0, x1, t, sigma: float, prng: Prng) -> np.ndarray:
    """``t x1 + (1 - t) x0 + sigma sqrt(t (1 - t)) xi`` with standard normal ``xi``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("bridge time must lie in the open interval (0, 1)")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    tt = t[..., None] if t.ndim and x0.ndim > t.ndim else t
    mean = tt * x1 + (1 - tt) * x0
    noise = prng.normal(np.broadcast_shapes(mean.shape, x0.shape))
    return mean + sigma * np.sqrt(tt * (1 - tt)) * noise


def bridge_targets(x0, x1, x, t, sigma: float):
    """Closed-form conditional flow and score of the Brownian bridge pinned at ``x0``, ``x1``.

    Returns ``(v, s)``; ``s`` is ``None`` when ``sigma == 0`` (score undefined).
    ``t`` may be a scalar or one value per row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None] if t.ndim and x.ndim > t.ndim else t
    var = tt * (1 - tt)
    if np.any(var < T_FLOOR):
        raise ValueError("t (1 - t) below floor; clamp t away from 0 and 1")
    mean = tt * x1 + (1 - tt) * x0
    v = (1 - 2 * tt) / var * (x - mean) + (x1 - x0)
    s = None if sigma == 0 else (mean - x) / (sigma ** 2 * var)
    return v, s


@dataclass
class Segment:
    """Coupled pair of adjacent retained marginals of one condition."""

    condition: str
    index: int
    x0: np.ndarray
    x1: np.ndarray
    coupling: Coupling


@dataclass
class BridgeBatch:
    t_local: np.ndarray
    t_global: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray
    s_target: np.ndarray | None
    condition: np.ndarray
    segment: np.ndarray

    def __len__(self):
        return self.x_t.shape[0]


def couple_dataset(dataset, epsilon: float, max_iter: int = 1000, tol: float = 1e-6,
                   conditions=None, cache: dict | None = None) -> dict[str, list[Segment]]:
    """Sinkhorn couplings for every adjacent pair of available marginals per condition.

    ``cache`` maps ``(condition, t_a, t_b, epsilon)`` to couplings so folds that
    share marginal pairs solve each one once.
    """
    out: dict[str, list[Segment]] = {}
    for cond in conditions if conditions is not None else dataset.conditions:
        times = dataset.available(cond)
        if len(times) < 2:
            log.warning("condition %s has fewer than 2 marginals; excluded from training", cond)
            continue
        segs = []
        for i, (ta, tb) in enumerate(zip(times[:-1], times[1:])):
            x0, x1 = dataset.get(cond, ta), dataset.get(cond, tb)
            key = (cond, ta, tb, epsilon)
            if cache is not None and key in cache:
                coupling = cache[key]
            else:
                coupling = sinkhorn(x0, x1, epsilon, max_iter, tol)
                if cache is not None:
                    cache[key] = coupling
            segs.append(Segment(cond, i, x0, x1, coupling))
        out[cond] = segs
    return out


def make_minibatch(segments: dict[str, list[Segment]], batch: int, prng: Prng,
                   t_min: float = 0.01, sigma: float = 1.0, condition: str | None = None) -> BridgeBatch:
    """Sample condition, segment, coupled pair and bridge time for ``batch`` elements.

    With ``condition`` given every element comes from that condition; otherwise
    conditions are drawn uniformly per element. Segment time is unit length, so
    ``t_global = segment + t_local``.
    """
    if not 0 < t_min < 0.5:
        raise ValueError("t_min must lie in (0, 0.5)")
    names = sorted(segments) if condition is None else [condition]
    if not names or any(not segments.get(c) for c in names):
        raise ValueError("no coupled segments available for the requested condition(s)")
    d = segments[names[0]][0].x0.shape[1]
    cond_idx = prng.integers(len(names), batch) if len(names) > 1 else np.zeros(batch, dtype=np.intp)
    seg = np.empty(batch, dtype=np.intp)
    x0 = np.empty((batch, d))
    x1 = np.empty((batch, d))
    for ci, name in enumerate(names):
        rows = np.flatnonzero(cond_idx == ci)
        if rows.size == 0:
            continue
        segs = segments[name]
        seg_choice = prng.integers(len(segs), rows.size)
        seg[rows] = seg_choice
        for si, s in enumerate(segs):
            sel = rows[seg_choice == si]
            if sel.size == 0:
                continue
            i, j = sample_pairs(s.coupling, prng, sel.size)
            x0[sel] = s.x0[i]
            x1[sel] = s.x1[j]
    t = prng.uniform(t_min, 1 - t_min, batch)
    if sigma > 0:
        x_t = sample_bridge_point(x0, x1, t, sigma, prng)
    else:
        x_t = t[:, None] * x1 + (1 - t[:, None]) * x0
    v, s = bridge_targets(x0, x1, x_t, t, sigma)
    return BridgeBatch(t, seg + t, x_t, v, s, np.asarray(names, dtype=object)[cond_idx], seg)
