"""Evaluation protocols shared by the CLI: multi-seed training, LOTO and LOKO folds."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .baseline_ou import OuModel, fit_reference, ou_graph, ou_rollout
from .bridge import couple_dataset
from .datagen import SnapshotDataset, condition_name, parse_condition
from .metrics import distribution_metrics, structure_scores
from .numerics import Prng
from .rollout import RolloutConfig, rollout
from .trainer import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

METHODS = ("structureflow", "rf")
NULL_METHOD = "null-copy-previous"


def workers() -> int:
    try:
        return max(1, int(os.environ.get("SFK_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    items = list(items)
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def fit_method(dataset: SnapshotDataset, config: TrainConfig, method: str = "structureflow",
               rf_ridge: float = 1e-3, rf_iters: int = 10, segments=None):
    """Train one model; returns ``(model, graph, report_or_None)``."""
    if method == "structureflow":
        rep = train(dataset, config, segments=segments)
        return rep.model, rep.graph, rep
    if method == "rf":
        model = fit_reference(dataset, config.sigma, rf_ridge, rf_iters,
                              config.sinkhorn_iters, config.sinkhorn_tol)
        return model, ou_graph(model), None
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def simulate(model, x0, segment: int, knockout: int | None, rollout_cfg: RolloutConfig,
             prng: Prng | None = None, t_end: float = 1.0) -> np.ndarray:
    if isinstance(model, OuModel):
        return ou_rollout(model, x0, segment, rollout_cfg.mode, knockout, rollout_cfg.steps, prng, t_end,
                          rollout_cfg.clamp)
    cfg = replace(rollout_cfg, condition=knockout, sigma=model.sigma)
    return rollout(model, x0, segment, cfg, prng, t_end)


def _seed_job(args):
    dataset, config, method, segments = args
    model, graph, report = fit_method(dataset, config, method, segments=segments)
    return model, graph, report


def train_seeds(dataset: SnapshotDataset, config: TrainConfig, seeds, method: str = "structureflow"):
    """Run one fit per seed, sharing the (seed-independent) Sinkhorn couplings."""
    segments = None
    if method == "structureflow":
        segments = couple_dataset(dataset, config.ot_epsilon, config.sinkhorn_iters, config.sinkhorn_tol)
    jobs = [(dataset, replace(config, seed=int(s)), method, segments) for s in seeds]
    return pmap(_seed_job, jobs)


def summarize_scores(scores: list) -> dict:
    au = np.array([s.auroc for s in scores])
    ap = np.array([s.ap for s in scores])
    return {"auroc_mean": float(au.mean()), "auroc_std": float(au.std()),
            "ap_mean": float(ap.mean()), "ap_std": float(ap.std()), "n_seeds": len(scores)}


def _dist_row(base: dict, pred, truth, seed: int, squared_w2: bool) -> dict:
    return {**base, **distribution_metrics(pred, truth, seed=seed, squared_w2=squared_w2)}


def _average(rows: list[dict], keys=("w2", "mmd2", "energy"), **label) -> dict:
    return {**label, **{k: float(np.mean([r[k] for r in rows])) for k in keys}}


def _segments_for(dataset, config, method, cache):
    if method != "structureflow":
        return None
    return couple_dataset(dataset, config.ot_epsilon, config.sinkhorn_iters, config.sinkhorn_tol, cache=cache)


def _loto_job(args):
    dataset, config, method, k, seed, rollout_cfg, squared, segments = args
    fold = dataset.subset(drop_timepoints=[k])
    model, _, _ = fit_method(fold, replace(config, seed=seed), method, segments=segments)
    rows = []
    for cond in dataset.conditions:
        times = fold.available(cond)
        if k - 1 not in times or k + 1 not in times:
            continue
        seg = times.index(k - 1)
        tp = dataset.timepoints
        frac = (tp[k] - tp[k - 1]) / (tp[k + 1] - tp[k - 1])
        x0 = dataset.get(cond, k - 1)
        pred = simulate(model, x0, seg, parse_condition(cond), rollout_cfg, Prng(seed).substream(7, k), frac)
        rows.append(_dist_row({"fold": k, "seed": seed, "condition": cond, "method": method},
                              pred, dataset.get(cond, k), seed, squared))
    return rows


def run_loto(dataset: SnapshotDataset, config: TrainConfig, seeds, method: str = "structureflow",
             rollout_cfg: RolloutConfig | None = None, squared_w2: bool = False) -> dict:
    """Leave-one-interior-timepoint-out: retrain without t_k, predict t_k from t_{k-1}."""
    if dataset.T < 3:
        raise ValueError("leave-one-timepoint-out needs at least 3 timepoints")
    rollout_cfg = rollout_cfg or RolloutConfig()
    folds = list(range(1, dataset.T - 1))
    cache = {}
    segments = {k: _segments_for(dataset.subset(drop_timepoints=[k]), config, method, cache) for k in folds}
    jobs = [(dataset, config, method, k, int(s), rollout_cfg, squared_w2, segments[k])
            for k in folds for s in seeds]
    rows = [r for chunk in pmap(_loto_job, jobs) for r in chunk]
    null_rows = []
    for k in folds:
        for cond in dataset.conditions:
            if {k - 1, k} <= set(dataset.available(cond)):
                null_rows.append(_dist_row({"fold": k, "seed": 0, "condition": cond, "method": NULL_METHOD},
                                           dataset.get(cond, k - 1), dataset.get(cond, k), 0, squared_w2))
    summary = []
    for k in folds:
        summary.append(_average([r for r in rows if r["fold"] == k], fold=k, method=method, kind="fold-mean"))
        summary.append(_average([r for r in null_rows if r["fold"] == k], fold=k, method=NULL_METHOD,
                                kind="fold-mean"))
    summary.append(_average(rows, fold="all", method=method, kind="average"))
    summary.append(_average(null_rows, fold="all", method=NULL_METHOD, kind="average"))
    return {"folds": folds, "rows": rows + null_rows, "summary": summary}


def _chain(model, dataset, cond, rollout_cfg, seed, squared):
    """Roll a condition forward from its own t0 across all segments, scoring every marginal."""
    ko = parse_condition(cond)
    times = dataset.available(cond)
    x = dataset.get(cond, times[0])
    prng = Prng(seed).substream(11, -1 if ko is None else ko)
    rows = []
    max_clamped = 0.0
    for seg, tb in enumerate(times[1:]):
        x = simulate(model, x, seg, ko, rollout_cfg, prng)
        if ko is not None:
            max_clamped = max(max_clamped, float(np.abs(x[:, ko]).max()))
        rows.append(_dist_row({"condition": cond, "timepoint": tb, "final": tb == times[-1]},
                              x, dataset.get(cond, tb), seed, squared))
    return rows, max_clamped


def _without(dataset, held):
    name = condition_name(held)
    return dataset.subset(conditions=[c for c in dataset.conditions if c != name])


def _loko_job(args):
    dataset, config, method, held, seed, rollout_cfg, squared, segments = args
    held_name = condition_name(held)
    model, graph, _ = fit_method(_without(dataset, held), replace(config, seed=seed), method,
                                 segments=segments)
    out = []
    for cond in dataset.conditions:
        ko = parse_condition(cond)
        if ko is None:
            continue
        rows, max_clamped = _chain(model, dataset, cond, rollout_cfg, seed, squared)
        role = "held-out" if cond == held_name else "seen"
        for r in rows:
            out.append({"heldout": held_name, "seed": seed, "method": method, "role": role,
                        "max_abs_clamped": max_clamped, **r})
    return out


def run_loko(dataset: SnapshotDataset, config: TrainConfig, seeds, heldout=None, method: str = "structureflow",
             rollout_cfg: RolloutConfig | None = None, squared_w2: bool = False) -> dict:
    """Leave-one-knockout-out: retrain without a knockout, then predict its marginals from its t0."""
    kos = dataset.knockouts()
    if len(kos) < 2:
        raise ValueError("leave-one-knockout-out needs at least 2 knockout conditions")
    heldout = list(kos[:3] if heldout is None else heldout)
    for h in heldout:
        if h not in kos:
            raise ValueError(f"held-out knockout {h} is not a condition of the dataset")
    rollout_cfg = rollout_cfg or RolloutConfig()
    cache = {}
    segments = {h: _segments_for(_without(dataset, h), config, method, cache) for h in heldout}
    jobs = [(dataset, config, method, h, int(s), rollout_cfg, squared_w2, segments[h])
            for h in heldout for s in seeds]
    rows = [r for chunk in pmap(_loko_job, jobs) for r in chunk]
    summary = []
    for h in heldout:
        name = condition_name(h)
        final = [r for r in rows if r["heldout"] == name and r["role"] == "held-out" and r["final"]]
        seen = [r for r in rows if r["heldout"] == name and r["role"] == "seen" and r["final"]]
        summary.append({**_average(final, heldout=name, method=method, kind="held-out-final"),
                        "seen_w2": float(np.mean([r["w2"] for r in seen])) if seen else None,
                        "max_abs_clamped": max(r["max_abs_clamped"] for r in final)})
    held_final = [r for r in rows if r["role"] == "held-out" and r["final"]]
    seen_final = [r for r in rows if r["role"] == "seen" and r["final"]]
    avg = _average(held_final, heldout="average", method=method, kind="average")
    avg["seen_w2"] = float(np.mean([r["w2"] for r in seen_final])) if seen_final else None
    avg["max_abs_clamped"] = max(r["max_abs_clamped"] for r in held_final)
    summary.append(avg)
    return {"heldout": [condition_name(h) for h in heldout], "rows": rows, "summary": summary}


def structure_summary(graphs, truth) -> dict:
    scores = [structure_scores(g, truth) for g in graphs]
    return {"per_seed": [s.to_dict() for s in scores], **summarize_scores(scores)}
