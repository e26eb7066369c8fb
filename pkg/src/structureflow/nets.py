"""Masked neural graphical drift, conditional score MLP, group-lasso prox and AdamW.

Every parameter set lives in one contiguous float64 buffer (``.flat``) with
named reshaped views, so the optimizer and checkpointing work on a single
vector while forward/backward passes use the structured views.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Prng

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# activations: (forward, derivative given pre-activation z and output a)

def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z, a):
    return np.where(z > 0, 1.0, a + 1.0)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, a):
    return 1.0 - a * a


ACTIVATIONS = {
    "elu": (_elu, _elu_grad),
    "relu": (_relu, _relu_grad),
    "tanh": (_tanh, _tanh_grad),
}


def _activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --------------------------------------------------------------------------
# parameter containers

class FlatParams:
    """Named arrays stored as views into one contiguous buffer."""

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.layout = [(name, tuple(shape)) for name, shape in layout]
        size = sum(math.prod(shape) for _, shape in self.layout)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"flat buffer has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self.tensors: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            self.tensors[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        # bumped by every in-place update so stale forward caches are detectable
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def _spawn(self, flat: np.ndarray) -> "FlatParams":
        raise NotImplementedError

    def zeros_like(self):
        return self._spawn(np.zeros_like(self.flat))

    def copy(self):
        return self._spawn(self.flat.copy())

    def penalty_mask(self) -> np.ndarray:
        """1.0 on entries subject to the l2 penalty, 0.0 elsewhere."""
        mask = self.zeros_like()
        for name in self.penalized():
            mask[name][...] = 1.0
        return mask.flat

    def penalized(self) -> list[str]:
        return []

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


class NgmParams(FlatParams):
    """Per-output-variable networks ``v_j(x) = psi(...psi(x W_j^A)...) w_j^out``.

    ``graph_w[j, i, :]`` is row ``i`` of the graph layer of output ``j``; its norm
    scores the edge ``i -> j``. ``hidden`` lists the widths after the graph
    layer, so ``len(hidden)`` is the depth K.
    """

    def __init__(self, d: int, hidden: Sequence[int], activation: str = "elu", flat=None):
        hidden = tuple(int(h) for h in hidden)
        if d < 1 or not hidden or min(hidden) < 1:
            raise ValueError(f"invalid NGM shape d={d}, hidden={hidden}")
        self.d = int(d)
        self.hidden = hidden
        self.activation = activation
        _activation(activation)
        layout = [("graph_w", (d, d, hidden[0])), ("graph_b", (d, hidden[0]))]
        for k in range(len(hidden) - 1):
            layout.append((f"hidden_w{k}", (d, hidden[k], hidden[k + 1])))
            layout.append((f"hidden_b{k}", (d, hidden[k + 1])))
        layout += [("out_w", (d, hidden[-1])), ("out_b", (d,))]
        super().__init__(layout, flat)

    @property
    def depth(self) -> int:
        return len(self.hidden)

    @property
    def graph_w(self) -> np.ndarray:
        return self.tensors["graph_w"]

    def _spawn(self, flat):
        return NgmParams(self.d, self.hidden, self.activation, flat)

    def penalized(self):
        # graph layer rows are governed by the group lasso instead
        return [f"hidden_w{k}" for k in range(self.depth - 1)] + ["out_w"]


class ScoreParams(FlatParams):
    """MLP on the concatenation ``[x, t, k]`` (width ``2d + 1``) returning ``d`` outputs."""

    def __init__(self, d: int, hidden: Sequence[int] = (100, 100), activation: str = "relu", flat=None):
        hidden = tuple(int(h) for h in hidden)
        self.d = int(d)
        self.hidden = hidden
        self.activation = activation
        _activation(activation)
        sizes = [2 * d + 1, *hidden, d]
        layout = []
        for k in range(len(sizes) - 1):
            layout.append((f"w{k}", (sizes[k], sizes[k + 1])))
            layout.append((f"b{k}", (sizes[k + 1],)))
        self.n_layers = len(sizes) - 1
        super().__init__(layout, flat)

    def _spawn(self, flat):
        return ScoreParams(self.d, self.hidden, self.activation, flat)

    def penalized(self):
        return [f"w{k}" for k in range(self.n_layers)]


def _gaussian_init(params: FlatParams, prng: Prng, weight_std: float, bias_std: float):
    for name, arr in params.tensors.items():
        is_bias = name.split("_")[-1].startswith("b")
        std = bias_std if is_bias else weight_std
        arr[...] = std * prng.normal(arr.shape)
    return params


def init_ngm(d: int, hidden: Sequence[int], prng: Prng, activation: str = "elu",
             weight_std: float = 0.1, bias_std: float = 1e-2) -> NgmParams:
    return _gaussian_init(NgmParams(d, hidden, activation), prng, weight_std, bias_std)


def init_score(d: int, hidden: Sequence[int], prng: Prng, activation: str = "relu",
               weight_std: float = 0.1, bias_std: float = 1e-2) -> ScoreParams:
    return _gaussian_init(ScoreParams(d, hidden, activation), prng, weight_std, bias_std)


# --------------------------------------------------------------------------
# interventions

@dataclass(frozen=True)
class InterventionMask:
    """Knockout of variable ``condition`` (``None`` for observational data).

    Entry (j, i) of the mask is 0 exactly when i is the knocked-out variable
    and j differs from it: the knocked-out variable loses all outgoing edges.
    """

    d: int
    condition: int | None = None

    def __post_init__(self):
        if self.condition is not None and not 0 <= self.condition < self.d:
            raise ValueError(f"knockout index {self.condition} outside 0..{self.d - 1}")

    @property
    def observational(self) -> bool:
        return self.condition is None

    def matrix(self) -> np.ndarray:
        m = np.ones((self.d, self.d))
        if self.condition is not None:
            c = self.condition
            m[:, c] = 0.0
            m[c, c] = 1.0
        return m

    def k_vector(self) -> np.ndarray:
        k = np.zeros(self.d)
        if self.condition is not None:
            k[self.condition] = 1.0
        return k

    def apply(self, graph_w: np.ndarray) -> np.ndarray:
        """Return the graph layer with masked rows zeroed (copy when masking)."""
        if self.condition is None:
            return graph_w
        out = graph_w.copy()
        c = self.condition
        out[:c, c, :] = 0.0
        out[c + 1:, c, :] = 0.0
        return out


# --------------------------------------------------------------------------
# NGM forward / backward

@dataclass
class _Cache:
    owner: int
    version: int
    inputs: np.ndarray
    zs: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    mask: InterventionMask | None = None


def _check_cache(params: FlatParams, cache: _Cache):
    if cache.owner != id(params) or cache.version != params.version:
        raise RuntimeError("stale cache: parameters changed since the forward pass")


def ngm_forward(params: NgmParams, x: np.ndarray, mask: InterventionMask | None = None):
    """Evaluate the masked drift on a batch; returns ``(drift (n, d), cache)``."""
    d, h0 = params.d, params.hidden[0]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected batch of shape (n, {d}), got {x.shape}")
    if mask is None:
        mask = InterventionMask(d)
    if mask.d != d:
        raise ValueError(f"mask built for d={mask.d}, network has d={d}")
    act, _ = _activation(params.activation)
    n = x.shape[0]
    w = mask.apply(params.graph_w)
    # z[j, n, h] = sum_i x[n, i] w[j, i, h]
    z = (x @ w.transpose(1, 0, 2).reshape(d, d * h0)).reshape(n, d, h0).transpose(1, 0, 2)
    z = z + params["graph_b"][:, None, :]
    a = act(z)
    cache = _Cache(id(params), params.version, x, [z], [a], mask)
    for k in range(params.depth - 1):
        z = np.matmul(a, params[f"hidden_w{k}"]) + params[f"hidden_b{k}"][:, None, :]
        a = act(z)
        cache.zs.append(z)
        cache.acts.append(a)
    out = np.einsum("jnh,jh->nj", a, params["out_w"]) + params["out_b"]
    return out, cache


def ngm_backward(params: NgmParams, cache: _Cache, upstream: np.ndarray) -> NgmParams:
    """Reverse-mode gradients of ``sum(upstream * drift)`` w.r.t. every parameter."""
    _check_cache(params, cache)
    d, h0 = params.d, params.hidden[0]
    g = np.asarray(upstream, dtype=np.float64)
    x = cache.inputs
    n = x.shape[0]
    if g.shape != (n, d):
        raise ValueError(f"upstream gradient has shape {g.shape}, expected {(n, d)}")
    _, dact = _activation(params.activation)
    grads = params.zeros_like()
    gt = g.T
    grads["out_w"][...] = np.einsum("jnh,jn->jh", cache.acts[-1], gt)
    grads["out_b"][...] = g.sum(axis=0)
    ga = gt[:, :, None] * params["out_w"][:, None, :]
    for k in reversed(range(params.depth - 1)):
        gz = ga * dact(cache.zs[k + 1], cache.acts[k + 1])
        grads[f"hidden_w{k}"][...] = np.matmul(cache.acts[k].transpose(0, 2, 1), gz)
        grads[f"hidden_b{k}"][...] = gz.sum(axis=1)
        ga = np.matmul(gz, params[f"hidden_w{k}"].transpose(0, 2, 1))
    gz = ga * dact(cache.zs[0], cache.acts[0])
    gw = (x.T @ gz.transpose(1, 0, 2).reshape(n, d * h0)).reshape(d, d, h0)
    grads["graph_w"][...] = gw.transpose(1, 0, 2)
    grads["graph_b"][...] = gz.sum(axis=1)
    c = cache.mask.condition if cache.mask is not None else None
    if c is not None:
        grads["graph_w"][:c, c, :] = 0.0
        grads["graph_w"][c + 1:, c, :] = 0.0
    return grads


# --------------------------------------------------------------------------
# score network

def score_forward(params: ScoreParams, x: np.ndarray, t: np.ndarray, k: np.ndarray):
    d = params.d
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    t = np.asarray(t, dtype=np.float64).reshape(n, 1)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim == 1:
        k = np.broadcast_to(k, (n, d))
    if x.shape != (n, d) or k.shape != (n, d):
        raise ValueError(f"score inputs must be (n, {d}); got x {x.shape}, k {k.shape}")
    act, _ = _activation(params.activation)
    a = np.concatenate([x, t, k], axis=1)
    cache = _Cache(id(params), params.version, a)
    last = params.n_layers - 1
    for layer in range(params.n_layers):
        z = a @ params[f"w{layer}"] + params[f"b{layer}"]
        a = z if layer == last else act(z)
        cache.zs.append(z)
        cache.acts.append(a)
    return a, cache


def score_backward(params: ScoreParams, cache: _Cache, upstream: np.ndarray) -> ScoreParams:
    _check_cache(params, cache)
    _, dact = _activation(params.activation)
    grads = params.zeros_like()
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.acts[-1].shape:
        raise ValueError(f"upstream gradient has shape {g.shape}, expected {cache.acts[-1].shape}")
    for layer in reversed(range(params.n_layers)):
        if layer != params.n_layers - 1:
            g = g * dact(cache.zs[layer], cache.acts[layer])
        inp = cache.inputs if layer == 0 else cache.acts[layer - 1]
        grads[f"w{layer}"][...] = inp.T @ g
        grads[f"b{layer}"][...] = g.sum(axis=0)
        if layer:
            g = g @ params[f"w{layer}"].T
    return grads


# --------------------------------------------------------------------------
# structure

def extract_graph(params: NgmParams) -> np.ndarray:
    """``A[j, i]`` = Euclidean norm of row ``i`` of output ``j``'s graph layer."""
    return np.linalg.norm(params.graph_w, axis=2)


def group_lasso_prox(params: NgmParams, threshold: float) -> NgmParams:
    """Row-wise block soft-thresholding of every graph layer, in place."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if threshold == 0:
        return params
    w = params.graph_w
    norms = np.linalg.norm(w, axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > threshold, 1.0 - threshold / norms, 0.0)
    w *= scale
    params.version += 1
    return params


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWState:
    size: int
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adamw_step(state: AdamWState, params: FlatParams, grads: FlatParams):
    """One decoupled-weight-decay Adam update of ``params`` in place."""
    g = grads.flat
    if g.shape != params.flat.shape or state.m.shape != g.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    if not np.all(np.isfinite(g)):
        bad = [name for name, arr in grads.tensors.items() if not np.all(np.isfinite(arr))]
        raise FloatingPointError(f"non-finite gradient in {bad} at optimizer step {state.step + 1}")
    state.step += 1
    p = params.flat
    if state.weight_decay:
        p *= 1.0 - state.lr * state.weight_decay
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    p -= (state.lr / bc1) * state.m / (np.sqrt(state.v / bc2) + state.eps)
    params.version += 1
    return params, state


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, ngm: NgmParams, score: ScoreParams | None = None,
                    ngm_opt: AdamWState | None = None, score_opt: AdamWState | None = None,
                    step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": "structureflow-checkpoint",
        "version": CHECKPOINT_VERSION,
        "d": ngm.d,
        "ngm_hidden": list(ngm.hidden),
        "ngm_activation": ngm.activation,
        "step": int(step),
        "extra": extra or {},
    }
    arrays = {"ngm": ngm.flat}
    if score is not None:
        meta["score_hidden"] = list(score.hidden)
        meta["score_activation"] = score.activation
        arrays["score"] = score.flat
    for tag, opt in (("ngm_opt", ngm_opt), ("score_opt", score_opt)):
        if opt is not None:
            meta[tag] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                         "weight_decay": opt.weight_decay, "step": opt.step}
            arrays[f"{tag}_m"] = opt.m
            arrays[f"{tag}_v"] = opt.v
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


@dataclass
class Checkpoint:
    ngm: NgmParams
    score: ScoreParams | None
    ngm_opt: AdamWState | None
    score_opt: AdamWState | None
    step: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "structureflow-checkpoint":
            raise ValueError(f"{path}: not a structureflow checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta['version']}")
        d = meta["d"]
        ngm = NgmParams(d, meta["ngm_hidden"], meta["ngm_activation"], data["ngm"].copy())
        score = None
        if "score" in data:
            score = ScoreParams(d, meta["score_hidden"], meta["score_activation"], data["score"].copy())
        opts = {}
        for tag in ("ngm_opt", "score_opt"):
            if tag in meta:
                o = meta[tag]
                opts[tag] = AdamWState(size=data[f"{tag}_m"].size, lr=o["lr"], beta1=o["beta1"],
                                       beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"],
                                       step=o["step"], m=data[f"{tag}_m"].copy(), v=data[f"{tag}_v"].copy())
    return Checkpoint(ngm, score, opts.get("ngm_opt"), opts.get("score_opt"), meta["step"], meta["extra"])
