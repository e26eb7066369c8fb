"""Simulation-free training of the masked drift and conditional score (score-and-flow loss)."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import BridgeBatch, couple_dataset, make_minibatch
from .datagen import SnapshotDataset, parse_condition
from .nets import (AdamWState, InterventionMask, NgmParams, ScoreParams, adamw_step, extract_graph,
                   group_lasso_prox, init_ngm, init_score, ngm_backward, ngm_forward, save_checkpoint,
                   score_backward, score_forward)
from .numerics import Prng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 15000
    batch: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-2
    alpha: float = 0.1
    group_lasso: float = 0.04
    l2: float = 5e-6
    sigma: float = 1.0
    t_min: float = 0.01
    ngm_hidden: tuple[int, ...] = (100,)
    score_hidden: tuple[int, ...] = (100, 100)
    ngm_activation: str = "elu"
    score_activation: str = "relu"
    seed: int = 1
    flow_only: bool = False
    # Sinkhorn regularization; None means sigma ** 2
    epsilon: float | None = None
    sinkhorn_iters: int = 1000
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        self.ngm_hidden = tuple(int(h) for h in self.ngm_hidden)
        self.score_hidden = tuple(int(h) for h in self.score_hidden)
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.sigma < 0 or (self.sigma == 0 and not self.flow_only):
            raise ValueError("sigma must be positive (sigma = 0 is only allowed with flow_only)")
        if self.group_lasso < 0 or self.l2 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    @property
    def ot_epsilon(self) -> float:
        eps = self.sigma ** 2 if self.epsilon is None else self.epsilon
        if eps <= 0:
            raise ValueError("Sinkhorn epsilon must be positive; set epsilon when sigma = 0")
        return eps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ngm_hidden"] = list(self.ngm_hidden)
        out["score_hidden"] = list(self.score_hidden)
        return out


@dataclass
class TrainedModel:
    ngm: NgmParams
    score: ScoreParams | None
    sigma: float
    flow_only: bool = False

    @property
    def d(self) -> int:
        return self.ngm.d


@dataclass
class TrainReport:
    loss_flow: list[float]
    loss_score: list[float]
    loss_penalty: list[float]
    seconds: float
    graph: np.ndarray
    config: TrainConfig
    model: TrainedModel = field(repr=False)
    checkpoint: str | None = None
    conditions: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "method": "structureflow",
            "version": __version__,
            "seed": self.config.seed,
            "flow_only": self.config.flow_only,
            "config": self.config.to_dict(),
            "conditions": self.conditions,
            "loss_flow": self.loss_flow,
            "loss_score": self.loss_score,
            "loss_penalty": self.loss_penalty,
            "seconds": self.seconds,
            "checkpoint": self.checkpoint,
            "graph": self.graph.tolist(),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; ``report`` holds the last finite state."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


@dataclass
class LossResult:
    total: float
    flow: float
    score: float
    penalty: float
    ngm_grad: NgmParams
    score_grad: ScoreParams | None


def probability_flow_drift(ngm: NgmParams, score: ScoreParams | None, x, t, mask: InterventionMask,
                           sigma: float, flow_only: bool = False) -> np.ndarray:
    """``v_theta(x | mask) - sigma^2 / 2 * s_phi(x, t | k)``; the score term is dropped in flow-only mode."""
    v, _ = ngm_forward(ngm, x, mask)
    if flow_only or score is None or sigma == 0:
        return v
    s, _ = score_forward(score, x, t, mask.k_vector())
    return v - 0.5 * sigma ** 2 * s


def _penalty_mask(params):
    cached = getattr(params, "_penalty_mask", None)
    if cached is None or cached.shape != params.flat.shape:
        cached = params.penalty_mask()
        params._penalty_mask = cached
    return cached


def sf_loss(batch: BridgeBatch, ngm: NgmParams, score: ScoreParams | None, config: TrainConfig) -> LossResult:
    """Mean weighted flow and score residuals plus the l2 penalty, with gradients for both nets."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    d = ngm.d
    alpha, sigma = config.alpha, config.sigma
    flow_only = config.flow_only or score is None
    w_flow = 1.0 if flow_only else 1.0 - alpha
    half_var = 0.5 * sigma ** 2
    ngm_grad = ngm.zeros_like()
    score_grad = None if flow_only else score.zeros_like()
    flow_sq = score_sq = 0.0
    conds = batch.condition
    for cond in dict.fromkeys(conds.tolist()):
        rows = np.flatnonzero(conds == cond)
        whole = rows.size == n
        x = batch.x_t if whole else batch.x_t[rows]
        mask = InterventionMask(d, parse_condition(cond))
        v, v_cache = ngm_forward(ngm, x, mask)
        if flow_only:
            vhat = v
        else:
            t = batch.t_global if whole else batch.t_global[rows]
            s, s_cache = score_forward(score, x, t, mask.k_vector())
            vhat = v - half_var * s
        r_flow = vhat - (batch.v_target if whole else batch.v_target[rows])
        g_vhat = (2.0 * w_flow / n) * r_flow
        if not flow_only:
            r_score = s - (batch.s_target if whole else batch.s_target[rows])
            bad = ~np.isfinite(r_flow).all(axis=1) | ~np.isfinite(r_score).all(axis=1)
        else:
            bad = ~np.isfinite(r_flow).all(axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite residual at batch index {int(rows[np.argmax(bad)])}")
        flow_sq += float(np.sum(r_flow * r_flow))
        ngm_grad.flat += ngm_backward(ngm, v_cache, g_vhat).flat
        if not flow_only:
            score_sq += float(np.sum(r_score * r_score))
            g_s = -half_var * g_vhat + (2.0 * alpha / n) * r_score
            score_grad.flat += score_backward(score, s_cache, g_s).flat
    loss_flow = flow_sq / n
    loss_score = score_sq / n
    penalty = 0.0
    if config.l2:
        pm = _penalty_mask(ngm)
        w = ngm.flat * pm
        penalty += float(w @ w)
        ngm_grad.flat += (2.0 * config.l2) * w
        if not flow_only:
            pm = _penalty_mask(score)
            w = score.flat * pm
            penalty += float(w @ w)
            score_grad.flat += (2.0 * config.l2) * w
        penalty *= config.l2
    total = w_flow * loss_flow + (0.0 if flow_only else alpha * loss_score) + penalty
    return LossResult(total, loss_flow, loss_score, penalty, ngm_grad, score_grad)


def init_model(d: int, config: TrainConfig) -> TrainedModel:
    prng = Prng(config.seed)
    ngm = init_ngm(d, config.ngm_hidden, prng.substream(0), config.ngm_activation)
    score = None if config.flow_only else init_score(d, config.score_hidden, prng.substream(1),
                                                     config.score_activation)
    return TrainedModel(ngm, score, config.sigma, config.flow_only)


def train(dataset: SnapshotDataset, config: TrainConfig, checkpoint_path=None,
          segments=None) -> TrainReport:
    """Score-and-flow training loop: minibatch, loss, AdamW, group-lasso prox.

    ``segments`` may carry precomputed couplings (from :func:`couple_dataset`
    with ``config.ot_epsilon``) to share them across seeds.
    """
    start = time.perf_counter()
    if segments is None:
        segments = couple_dataset(dataset, config.ot_epsilon, config.sinkhorn_iters, config.sinkhorn_tol)
    if not segments:
        raise ValueError("dataset needs at least one condition with two or more timepoints")
    conditions = sorted(segments)
    model = init_model(dataset.d, config)
    ngm, score = model.ngm, model.score
    ngm_opt = AdamWState(ngm.flat.size, lr=config.lr, weight_decay=config.weight_decay)
    score_opt = None if score is None else AdamWState(score.flat.size, lr=config.lr,
                                                      weight_decay=config.weight_decay)
    target_sigma = 0.0 if config.flow_only else config.sigma
    tau = config.lr * config.group_lasso
    root = Prng(config.seed)
    flows, scores, penalties = [], [], []

    def report(seconds):
        return TrainReport(flows, scores, penalties, seconds, extract_graph(ngm), config, model,
                           str(checkpoint_path) if checkpoint_path else None, conditions)

    for step in range(config.steps):
        rng = root.substream(2, step)
        cond = conditions[int(rng.integers(len(conditions)))] if len(conditions) > 1 else conditions[0]
        batch = make_minibatch(segments, config.batch, rng, config.t_min, target_sigma, condition=cond)
        try:
            res = sf_loss(batch, ngm, score, config)
            if not np.isfinite(res.total):
                raise FloatingPointError(f"non-finite loss {res.total}")
            adamw_step(ngm_opt, ngm, res.ngm_grad)
            if score is not None:
                adamw_step(score_opt, score, res.score_grad)
        except FloatingPointError as err:
            rep = report(time.perf_counter() - start)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, ngm, score, ngm_opt, score_opt, step)
            raise TrainingDiverged(f"training diverged at step {step}: {err}", rep) from err
        group_lasso_prox(ngm, tau)
        flows.append(res.flow)
        scores.append(res.score)
        penalties.append(res.penalty)
        if log.isEnabledFor(logging.DEBUG) and step % 1000 == 0:
            log.debug("step %d flow %.4f score %.4f", step, res.flow, res.score)
    rep = report(time.perf_counter() - start)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, ngm, score, ngm_opt, score_opt, config.steps,
                        extra={"sigma": config.sigma, "flow_only": config.flow_only})
    return rep
