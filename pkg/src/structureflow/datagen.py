"""Synthetic linear stochastic systems and the snapshot dataset container/format."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Prng

log = logging.getLogger(__name__)

OBSERVATIONAL = "obs"
BLOWUP_GUARD = 1e6


class DatasetFormatError(ValueError):
    pass


def condition_name(knockout: int | None) -> str:
    return OBSERVATIONAL if knockout is None else f"ko{int(knockout)}"


def parse_condition(name: str) -> int | None:
    if name == OBSERVATIONAL:
        return None
    if name.startswith("ko") and name[2:].isdigit():
        return int(name[2:])
    raise ValueError(f"unrecognized condition name {name!r} (expected 'obs' or 'ko<index>')")


@dataclass
class SnapshotDataset:
    """Per-condition, per-timepoint sample matrices.

    ``data[cond][k]`` holds the ``N x d`` samples of condition ``cond`` at the
    k-th timepoint ``timepoints[k]``. A condition may lack some timepoints
    (leave-one-timepoint-out folds). Reads through :meth:`get` are recorded in
    ``access_log``.
    """

    d: int
    timepoints: list[float]
    data: dict[str, dict[int, np.ndarray]]
    graph: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    access_log: list[tuple[str, int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        for cond, marginals in self.data.items():
            parse_condition(cond)
            for k, x in marginals.items():
                if x.ndim != 2 or x.shape[1] != self.d:
                    raise ValueError(f"marginal {cond}/t{k} has shape {x.shape}, expected (N, {self.d})")
                if not 0 <= k < len(self.timepoints):
                    raise ValueError(f"marginal {cond}/t{k} outside the {len(self.timepoints)} timepoints")

    @property
    def conditions(self) -> list[str]:
        return list(self.data)

    @property
    def T(self) -> int:
        return len(self.timepoints)

    def knockouts(self) -> list[int]:
        return [c for c in map(parse_condition, self.conditions) if c is not None]

    def available(self, cond: str) -> list[int]:
        return sorted(self.data[cond])

    def get(self, cond: str, k: int) -> np.ndarray:
        try:
            x = self.data[cond][k]
        except KeyError:
            raise KeyError(f"dataset has no marginal for condition {cond!r} at timepoint {k}") from None
        self.access_log.append((cond, k))
        return x

    def subset(self, conditions=None, drop_timepoints=()) -> "SnapshotDataset":
        """View restricted to ``conditions`` with the given timepoint indices removed."""
        conditions = self.conditions if conditions is None else list(conditions)
        drop = set(drop_timepoints)
        data = {c: {k: self.get(c, k) for k in self.available(c) if k not in drop} for c in conditions}
        return SnapshotDataset(self.d, list(self.timepoints), data, self.graph, dict(self.meta))


# --------------------------------------------------------------------------
# generator

@dataclass
class LinearSystem:
    """``dx = (A - damping I) x dt + sigma_sim dB``; ``A`` is the ground-truth graph."""

    d: int
    A: np.ndarray
    sigma_sim: float = 0.1
    sparsity: float = 0.2
    damping: float = 0.0
    seed: int | None = None

    @property
    def drift_matrix(self) -> np.ndarray:
        return self.A - self.damping * np.eye(self.d)


def gen_er_graph(d: int, p: float, prng: Prng) -> np.ndarray:
    """Erdos-Renyi directed graph with weights from U(-1, -0.5) u U(0.5, 1); zero diagonal."""
    if not 0 <= p <= 1:
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    edges = prng.random((d, d)) < p
    np.fill_diagonal(edges, False)
    magnitude = prng.uniform(0.5, 1.0, (d, d))
    sign = np.where(prng.random((d, d)) < 0.5, -1.0, 1.0)
    return np.where(edges, sign * magnitude, 0.0)


def gershgorin_damping(A: np.ndarray) -> float:
    return float(np.abs(A).sum(axis=1).max() + 0.1)


def make_linear_system(d: int, p: float, seed: int, sigma_sim: float = 0.1, damping: bool = True) -> LinearSystem:
    A = gen_er_graph(d, p, Prng(seed).substream(0))
    return LinearSystem(d, A, sigma_sim, p, gershgorin_damping(A) if damping else 0.0, seed)


def simulate_linear(system: LinearSystem, T: int = 5, N: int = 1000, horizon: float = 1.0, dt: float = 0.01,
                    knockout: int | None = None, prng: Prng | None = None, x0: np.ndarray | None = None,
                    init_var: float = 0.5) -> list[np.ndarray]:
    """Euler-Maruyama particles, returning snapshots at ``T`` equally spaced times in [0, horizon].

    Under ``knockout=c`` coordinate ``c`` is held at zero throughout (initial
    value, drift and noise).
    """
    if horizon <= 0 or dt <= 0 or T < 2:
        raise ValueError("need horizon > 0, dt > 0 and T >= 2")
    n_steps = int(round(horizon / dt))
    every = n_steps // (T - 1)
    if abs(n_steps * dt - horizon) > 1e-9 * horizon or every * (T - 1) != n_steps:
        raise ValueError(f"dt={dt} must divide the snapshot spacing {horizon / (T - 1)}")
    prng = prng or Prng(0)
    d = system.d
    if x0 is None:
        x = np.sqrt(init_var) * prng.normal((N, d))
    else:
        x = np.array(np.broadcast_to(np.asarray(x0, dtype=np.float64), (N, d)))
    if knockout is not None:
        x[:, knockout] = 0.0
    M_t = system.drift_matrix.T
    noise_scale = system.sigma_sim * np.sqrt(dt)
    snaps = [x.copy()]
    for step in range(1, n_steps + 1):
        x = x + dt * (x @ M_t)
        if noise_scale:
            x += noise_scale * prng.normal((N, d))
        if knockout is not None:
            x[:, knockout] = 0.0
        if not np.all(np.abs(x) < BLOWUP_GUARD):
            raise FloatingPointError(f"trajectories exceeded {BLOWUP_GUARD:g} at step {step}; enable damping")
        if step % every == 0:
            snaps.append(x.copy())
    return snaps


def generate_dataset(d: int = 10, p: float = 0.2, T: int = 5, N: int = 1000, knockouts=(), seed: int = 1,
                     sigma_sim: float = 0.1, horizon: float = 1.0, dt: float = 0.01,
                     damping: bool = True) -> tuple[SnapshotDataset, LinearSystem]:
    system = make_linear_system(d, p, seed, sigma_sim, damping)
    root = Prng(seed)
    data = {}
    for idx, ko in enumerate([None, *knockouts]):
        if ko is not None and not 0 <= ko < d:
            raise ValueError(f"knockout {ko} outside 0..{d - 1}")
        snaps = simulate_linear(system, T, N, horizon, dt, ko, root.substream(1, idx))
        data[condition_name(ko)] = dict(enumerate(snaps))
    meta = {
        "seed": seed,
        "generator": {"kind": "linear", "d": d, "p": p, "T": T, "N": N, "knockouts": list(knockouts),
                      "sigma_sim": sigma_sim, "horizon": horizon, "dt": dt, "damping": system.damping},
    }
    times = list(np.linspace(0.0, horizon, T))
    return SnapshotDataset(d, times, data, system.A.copy(), meta), system


# --------------------------------------------------------------------------
# file format

def _write_csv(path: Path, x: np.ndarray):
    np.savetxt(path, np.atleast_2d(x), fmt="%.17g", delimiter=",")


def read_matrix_csv(path, cols: int | None = None) -> np.ndarray:
    """Parse a comma-separated matrix, naming the offending line on malformed input."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if cols is None:
                cols = len(fields)
            if len(fields) != cols:
                raise DatasetFormatError(f"{path}:{lineno}: expected {cols} columns, found {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric value in row") from None
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_dataset(dataset: SnapshotDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "structureflow-dataset",
        "version": 1,
        "d": dataset.d,
        "T": dataset.T,
        "timepoints": [float(t) for t in dataset.timepoints],
        "conditions": dataset.conditions,
        "marginals": {c: dataset.available(c) for c in dataset.conditions},
        "has_graph": dataset.graph is not None,
        **dataset.meta,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if dataset.graph is not None:
        _write_csv(path / "graph.csv", dataset.graph)
    for cond in dataset.conditions:
        for k in dataset.available(cond):
            _write_csv(path / f"cond_{cond}_t{k}.csv", dataset.data[cond][k])
    return path


def read_dataset(path) -> SnapshotDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{meta_path}: missing dataset header") from None
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"{meta_path}:{err.lineno}: malformed header ({err.msg})") from None
    for key in ("d", "T", "conditions"):
        if key not in meta:
            raise DatasetFormatError(f"{meta_path}: header lacks required key {key!r}")
    d, T = int(meta["d"]), int(meta["T"])
    timepoints = meta.get("timepoints") or list(np.linspace(0.0, 1.0, T))
    marginals = meta.get("marginals") or {c: list(range(T)) for c in meta["conditions"]}
    data = {}
    for cond in meta["conditions"]:
        data[cond] = {}
        for k in marginals[cond]:
            f = path / f"cond_{cond}_t{k}.csv"
            if not f.exists():
                raise DatasetFormatError(f"{f}: missing marginal for condition {cond!r} at timepoint {k}")
            data[cond][int(k)] = read_matrix_csv(f, cols=d)
    graph = None
    if (path / "graph.csv").exists():
        graph = read_matrix_csv(path / "graph.csv", cols=d)
        if graph.shape != (d, d):
            raise DatasetFormatError(f"{path / 'graph.csv'}: expected {d} rows, found {graph.shape[0]}")
    extra = {k: v for k, v in meta.items()
             if k not in {"format", "version", "d", "T", "timepoints", "conditions", "marginals", "has_graph"}}
    return SnapshotDataset(d, [float(t) for t in timepoints], data, graph, extra)
