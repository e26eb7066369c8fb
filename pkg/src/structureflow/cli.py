"""``sfk`` command-line front end for batch experiments.

Configuration is an INI-style file of ``[section]`` blocks with ``key = value``
lines, overridable with ``--set section.key=value``. Every command writes CSV
and JSON artifacts into ``--out`` (or ``run.out``).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .baseline_ou import fit_reference, ou_graph
from .datagen import DatasetFormatError, generate_dataset, read_dataset, read_matrix_csv, write_dataset
from .metrics import structure_scores
from .nets import save_checkpoint
from .protocols import run_loko, run_loto, structure_summary, train_seeds
from .rollout import RolloutConfig
from .trainer import TrainConfig, TrainingDiverged

log = logging.getLogger("structureflow")

DEFAULTS = {
    "data": {"d": "10", "p": "0.2", "T": "5", "N": "1000", "knockouts": "", "seed": "1",
             "sigma_sim": "0.1", "horizon": "1.0", "dt": "0.01", "damping": "true"},
    "train": {"sigma": "auto"},
    "eval": {"method": "structureflow", "mode": "ode", "steps": "100", "report_squared": "false"},
    "run": {"seeds": "1"},
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.optionxform = str
    cfg.read_dict(DEFAULTS)
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file {path} does not exist")
        cfg.read(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot or not section or not option:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, option, value.strip())
    return cfg


def config_digest(cfg: configparser.ConfigParser) -> str:
    text = "\n".join(f"{s}.{k}={v}" for s in sorted(cfg.sections()) for k, v in sorted(cfg.items(s)))
    return hashlib.sha256(text.encode()).hexdigest()


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def load_data(cfg):
    data = cfg["data"]
    if data.get("path"):
        try:
            return read_dataset(data["path"])
        except (FileNotFoundError, DatasetFormatError) as err:
            raise UsageError(str(err)) from None
    return generate_from(cfg)


def generate_from(cfg):
    data = cfg["data"]
    try:
        p = float(data["p"])
        params = dict(d=int(data["d"]), p=p, T=int(data["T"]), N=int(data["N"]),
                      knockouts=tuple(_int_list(data["knockouts"])), seed=int(data["seed"]),
                      sigma_sim=float(data["sigma_sim"]), horizon=float(data["horizon"]), dt=float(data["dt"]),
                      damping=_bool(data["damping"]))
    except ValueError as err:
        raise UsageError(f"invalid [data] parameter: {err}") from None
    if not 0 <= p <= 1:
        raise UsageError(f"data.p must lie in [0, 1], got {p}")
    if params["d"] < 1 or params["T"] < 2 or params["N"] < 1:
        raise UsageError("need d >= 1, T >= 2 and N >= 1")
    try:
        dataset, _ = generate_dataset(**params)
    except ValueError as err:
        raise UsageError(str(err)) from None
    return dataset


def train_config(cfg, dataset=None) -> TrainConfig:
    section = dict(cfg["train"]) if cfg.has_section("train") else {}
    kwargs = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in section.items():
        if key not in types:
            raise UsageError(f"unknown train option {key!r}")
        if key == "sigma" and raw == "auto":
            # the noise level is assumed known; synthetic datasets record it
            gen = (dataset.meta.get("generator", {}) if dataset is not None else {})
            kwargs["sigma"] = float(gen.get("sigma_sim", 1.0))
            continue
        if key in ("ngm_hidden", "score_hidden"):
            kwargs[key] = tuple(_int_list(raw))
        elif key == "flow_only":
            kwargs[key] = _bool(raw)
        elif key in ("ngm_activation", "score_activation"):
            kwargs[key] = raw
        elif key == "epsilon":
            kwargs[key] = None if raw in ("", "none", "None") else float(raw)
        elif key in ("steps", "batch", "seed", "sinkhorn_iters"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    try:
        return TrainConfig(**kwargs)
    except ValueError as err:
        raise UsageError(str(err)) from None


def seeds_of(cfg) -> list[int]:
    seeds = _int_list(cfg["run"].get("seeds", "1"))
    if not seeds:
        raise UsageError("run.seeds must be non-empty")
    return seeds


def rollout_config(cfg) -> RolloutConfig:
    ev = cfg["eval"]
    try:
        return RolloutConfig(steps=int(ev["steps"]), mode=ev["mode"])
    except ValueError as err:
        raise UsageError(str(err)) from None


# --------------------------------------------------------------------------
# output helpers

def _out_dir(args, cfg) -> Path:
    out = args.out or (cfg["run"].get("out") if cfg.has_section("run") else None)
    if not out:
        raise UsageError("an output directory is required (--out DIR or run.out)")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory {path}: {err}") from None
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_csv(path: Path, rows: list[dict]) -> Path:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _write_graph(path: Path, graph: np.ndarray) -> Path:
    np.savetxt(path, graph, fmt="%.17g", delimiter=",")
    return path


def directory_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.iterdir() if p.is_file()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _provenance(cfg, **extra) -> dict:
    return {"version": __version__, "config_digest": config_digest(cfg), **extra}


# --------------------------------------------------------------------------
# commands

def cmd_generate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    dataset = generate_from(cfg)
    write_dataset(dataset, out)
    digest = directory_digest(out)
    print(f"{digest}  {out}")
    return 0


def cmd_train(args, cfg) -> int:
    out = _out_dir(args, cfg)
    dataset = load_data(cfg)
    config = train_config(cfg, dataset)
    seeds = seeds_of(cfg)
    method = cfg["eval"].get("method", "structureflow")
    try:
        results = train_seeds(dataset, config, seeds, method)
    except TrainingDiverged as err:
        log.error("%s", err)
        return 1
    graphs = []
    for seed, (model, graph, report) in zip(seeds, results):
        sub = out / f"seed_{seed}"
        sub.mkdir(exist_ok=True)
        _write_graph(sub / "graph.csv", graph)
        graphs.append(graph)
        if report is not None:
            ckpt = save_checkpoint(sub / "checkpoint.npz", model.ngm, model.score, step=config.steps,
                                   extra={"sigma": config.sigma, "flow_only": config.flow_only})
            report.checkpoint = str(ckpt)
            body = report.to_json()
        else:
            body = {"method": "rf-baseline", "A": model.A, "b": model.b, "objective": model.objective,
                    "graph": graph}
        _write_json(sub / "report.json", {**body, **_provenance(cfg, seed=seed)})
    summary = {"method": method, "flow_only": config.flow_only, "seeds": seeds,
               "config": config.to_dict(), **_provenance(cfg)}
    if dataset.graph is not None:
        summary.update(structure_summary(graphs, dataset.graph))
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k.endswith(("_mean", "_std"))}))
    return 0


def cmd_rf(args, cfg) -> int:
    out = _out_dir(args, cfg)
    dataset = load_data(cfg)
    config = train_config(cfg, dataset)
    rf = cfg["rf"] if cfg.has_section("rf") else {}
    model = fit_reference(dataset, config.sigma, float(rf.get("ridge", 1e-3)), int(rf.get("outer_iters", 10)))
    graph = ou_graph(model)
    _write_graph(out / "graph.csv", graph)
    body = {"method": "rf-baseline", "A": model.A, "b": model.b, "sigma": model.sigma, "ridge": model.ridge,
            "objective": model.objective, "graph": graph, **_provenance(cfg)}
    if dataset.graph is not None:
        body["structure"] = structure_scores(graph, dataset.graph).to_dict()
    _write_json(out / "report.json", body)
    return 0


def _table_outputs(out: Path, name: str, result: dict):
    _write_csv(out / f"{name}_rows.csv", result["rows"])
    _write_csv(out / f"{name}_summary.csv", result["summary"])
    _write_json(out / f"{name}.json", result)


def cmd_loto(args, cfg) -> int:
    out = _out_dir(args, cfg)
    dataset = load_data(cfg)
    if dataset.T < 3:
        raise UsageError("leave-one-timepoint-out needs T >= 3")
    result = run_loto(dataset, train_config(cfg, dataset), seeds_of(cfg), cfg["eval"]["method"],
                      rollout_config(cfg), _bool(cfg["eval"]["report_squared"]))
    result.update(_provenance(cfg))
    _table_outputs(out, "loto", result)
    return 0


def cmd_loko(args, cfg) -> int:
    out = _out_dir(args, cfg)
    dataset = load_data(cfg)
    held = cfg["eval"].get("heldout")
    held = _int_list(held) if held else None
    try:
        result = run_loko(dataset, train_config(cfg, dataset), seeds_of(cfg), held, cfg["eval"]["method"],
                          rollout_config(cfg), _bool(cfg["eval"]["report_squared"]))
    except ValueError as err:
        raise UsageError(str(err)) from None
    result.update(_provenance(cfg))
    _table_outputs(out, "loko", result)
    return 0


def cmd_eval_structure(args, cfg) -> int:
    ev = cfg["eval"]
    graph_path = args.graph or ev.get("graph")
    truth_path = args.truth or ev.get("truth")
    if not graph_path or not truth_path:
        raise UsageError("eval-structure needs --graph and --truth (or eval.graph / eval.truth)")
    try:
        graph = read_matrix_csv(graph_path)
        truth = read_matrix_csv(truth_path)
        score = structure_scores(graph, truth)
    except (OSError, ValueError) as err:
        raise UsageError(str(err)) from None
    body = {**score.to_dict(), **score.ratios(), "prevalence": score.prevalence, **_provenance(cfg)}
    if args.out or cfg["run"].get("out"):
        _write_json(_out_dir(args, cfg) / "structure.json", body)
    print(json.dumps(body))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "loto": cmd_loto,
    "loko": cmd_loko,
    "eval-structure": cmd_eval_structure,
    "rf": cmd_rf,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfk", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI-style experiment configuration")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config entry, e.g. --set train.steps=500")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--graph", help="eval-structure: predicted graph CSV")
    parser.add_argument("--truth", help="eval-structure: ground-truth graph CSV")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"sfk {__version__}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except UsageError as err:
        print(f"sfk {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
