"""Euler integration of learned dynamics: probability-flow ODE and Euler-Maruyama SDE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import InterventionMask, NgmParams, ScoreParams, ngm_forward, score_forward
from .numerics import Prng


@dataclass
class RolloutConfig:
    steps: int = 100
    mode: str = "ode"
    sigma: float = 1.0
    condition: int | None = None
    # hold a knocked-out coordinate at zero, mirroring how knockout data is generated
    clamp: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"mode must be 'ode' or 'sde', got {self.mode!r}")


def _prepare(ngm: NgmParams, x0, config: RolloutConfig):
    mask = InterventionMask(ngm.d, config.condition)
    x = np.array(x0, dtype=np.float64)
    if config.clamp and config.condition is not None:
        x[:, config.condition] = 0.0
    return mask, x


def _finish_step(x, config, step):
    if config.clamp and config.condition is not None:
        x[:, config.condition] = 0.0
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite state at rollout step {step}")


def rollout_ode(ngm: NgmParams, score: ScoreParams | None, x0, segment: int, config: RolloutConfig,
                t_end: float = 1.0) -> np.ndarray:
    """Explicit Euler on ``v(x) - sigma^2/2 s(x, segment + tau)`` over local time [0, t_end]."""
    mask, x = _prepare(ngm, x0, config)
    h = 1.0 / config.steps
    n_steps = int(round(t_end * config.steps))
    k = mask.k_vector()
    use_score = score is not None and config.sigma > 0
    t_col = np.empty((x.shape[0], 1))
    for step in range(n_steps):
        v, _ = ngm_forward(ngm, x, mask)
        if use_score:
            t_col.fill(segment + step * h)
            s, _ = score_forward(score, x, t_col, k)
            v -= 0.5 * config.sigma ** 2 * s
        x += h * v
        _finish_step(x, config, step)
    return x


def rollout_sde(ngm: NgmParams, x0, segment: int, config: RolloutConfig, prng: Prng,
                t_end: float = 1.0) -> np.ndarray:
    """Euler-Maruyama on ``dx = v(x) dt + sigma dB``."""
    mask, x = _prepare(ngm, x0, config)
    h = 1.0 / config.steps
    n_steps = int(round(t_end * config.steps))
    noise = config.sigma * np.sqrt(h)
    for step in range(n_steps):
        v, _ = ngm_forward(ngm, x, mask)
        x += h * v
        if noise:
            x += noise * prng.normal(x.shape)
        _finish_step(x, config, step)
    return x


def rollout(model, x0, segment: int, config: RolloutConfig, prng: Prng | None = None,
            t_end: float = 1.0) -> np.ndarray:
    """Dispatch on ``config.mode`` for a trained model (anything with ``ngm``/``score``)."""
    if config.mode == "sde":
        return rollout_sde(model.ngm, x0, segment, config, prng or Prng(0), t_end)
    return rollout_ode(model.ngm, model.score, x0, segment, config, t_end)
