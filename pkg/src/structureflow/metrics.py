"""Distributional distances between sample clouds and threshold-free structure scores."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .eot import EXACT_OT_CAP, exact_ot
from .numerics import Prng

MMD_SCALES = (0.01, 0.1, 1.0, 10.0, 100.0)


def _cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("empty sample cloud")
    return x


def common_subsample(p, q, cap: int = EXACT_OT_CAP, seed: int = 0):
    """Subsample both clouds (without replacement) to ``min(n, m, cap)`` points."""
    p, q = _cloud(p), _cloud(q)
    size = min(len(p), len(q), cap)
    prng = Prng(seed)
    if len(p) > size:
        p = p[np.sort(prng.gen.choice(len(p), size, replace=False))]
    if len(q) > size:
        q = q[np.sort(prng.gen.choice(len(q), size, replace=False))]
    return p, q


def w2(p, q, cap: int = EXACT_OT_CAP, seed: int = 0, squared: bool = False) -> float:
    """Wasserstein-2 from the exact squared-Euclidean matching on a common-size subsample."""
    p, q = common_subsample(p, q, cap, seed)
    cost, _ = exact_ot(p, q, cap)
    cost = max(cost, 0.0)
    return cost if squared else float(np.sqrt(cost))


def mmd2(p, q, scales=MMD_SCALES) -> float:
    """Biased MMD^2 with RBF kernels ``exp(-r^2 / (2 s^2))``, averaged over ``scales``."""
    p, q = _cloud(p), _cloud(q)
    dpp = cdist(p, p, "sqeuclidean")
    dqq = cdist(q, q, "sqeuclidean")
    dpq = cdist(p, q, "sqeuclidean")
    vals = []
    for s in scales:
        g = 1.0 / (2.0 * s * s)
        vals.append(np.exp(-g * dpp).mean() + np.exp(-g * dqq).mean() - 2.0 * np.exp(-g * dpq).mean())
    return float(max(np.mean(vals), 0.0))


def energy_distance(p, q) -> float:
    """Squared energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic)."""
    p, q = _cloud(p), _cloud(q)
    val = 2.0 * cdist(p, q).mean() - cdist(p, p).mean() - cdist(q, q).mean()
    return float(max(val, 0.0))


def distribution_metrics(pred, truth, seed: int = 0, squared_w2: bool = False) -> dict:
    return {
        "w2": w2(pred, truth, seed=seed, squared=squared_w2),
        "mmd2": mmd2(pred, truth),
        "energy": energy_distance(pred, truth),
    }


def metric_report(metric: str, value: float, n: int, m: int, seed: int = 0, options: dict | None = None) -> dict:
    return {"metric": metric, "value": value, "n": n, "m": m, "seed": seed, "options": options or {}}


@dataclass
class StructureScore:
    auroc: float
    ap: float
    num_positives: int
    num_evaluated_edges: int

    @property
    def prevalence(self) -> float:
        return self.num_positives / self.num_evaluated_edges

    def ratios(self) -> dict:
        """Performance relative to a random predictor (AP / prevalence, AUROC / 0.5)."""
        return {"ap_ratio": self.ap / self.prevalence, "auroc_ratio": self.auroc / 0.5}

    def to_dict(self) -> dict:
        return asdict(self)


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined without both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over distinct thresholds of (recall increment) x precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("AP is undefined without both positives and negatives")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def structure_scores(predicted, truth, exclude_diagonal: bool = True) -> StructureScore:
    """AUROC/AP of edge scores against the binarized ground truth (off-diagonal by default)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 2 or predicted.shape[0] != predicted.shape[1]:
        raise ValueError(f"predicted {predicted.shape} and truth {truth.shape} must be equal square matrices")
    keep = ~np.eye(predicted.shape[0], dtype=bool) if exclude_diagonal else np.ones(predicted.shape, bool)
    scores = predicted[keep]
    labels = truth[keep] != 0
    return StructureScore(auroc(scores, labels), average_precision(scores, labels),
                          int(labels.sum()), int(labels.size))
