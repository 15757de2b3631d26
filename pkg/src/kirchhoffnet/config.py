"""Experiment configuration: JSON schema, defaults, cross-field checks, and builders."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from ._io import atomic_write_text
from .datasets import (DENSITY_NAMES, GEN2D_NAMES, Dataset, density_target, gen2d, gen_friedman,
                       load_csv, load_idx)
from .devices import LEARNABLE_KINDS, DeviceKind
from .errors import ConfigError
from .integrator import METHODS, _ALIASES
from .model import KirchhoffNet, build_net
from .topology import fc_topo, ne_topo, proj_topo
from .training import TrainConfig

CONFIG_VERSION = 1
TASKS = ("regression", "classification", "generation", "density")
TASK_LOSS = {"regression": "l2", "classification": "cross_entropy",
             "generation": "nll_generation", "density": "density_matching"}
# 2-D generation and density runs default to a long schedule with no early stopping
FLOW_DEFAULT_EPOCHS = 10000
SOURCES = ("friedman", "gen2d", "csv", "idx", "density")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "task": "regression",
    "seed": 0,
    "out_dir": "runs/experiment",
    "data": {
        "source": "friedman", "name": None, "n": 1000, "n_test": 1024, "noise_sd": 0.0,
        "test_fraction": 0.2, "path": None, "test_path": None, "target_column": None,
        "images": None, "labels": None, "test_images": None, "test_labels": None,
        "limit": None, "test_limit": None, "target": None,
    },
    "net": {
        "layer": "fc", "nodes": 10, "repeat": 1, "ground_repeat": 0,
        "c": 1, "w": 28, "h": 28, "k": 2, "n_proj": 10, "repeat_proj": 1,
        "D": 1, "T": 1.0, "steps": 40, "method": "euler", "kind": "relu2", "theta_cap": 1.0,
        "input_nodes": "auto", "readout_nodes": "auto",
    },
    "train": {
        "epochs": 10, "batch_size": 64, "lr": 1e-3, "weight_decay": 0.01, "optimizer": "adamw",
        "scheduler": False, "clip": 100.0, "eval_every": 1, "steps_per_epoch": 1, "eval_samples": 4096,
        "stop_at": None,
    },
}

_num = {"type": "number"}
_int = {"type": "integer"}
_opt_str = {"type": ["string", "null"]}
_opt_int = {"type": ["integer", "null"]}
_nodes = {"oneOf": [{"const": "auto"}, {"type": "array", "items": _int}]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "KirchhoffNet experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": _int,
        "task": {"type": "string"},
        "seed": _int,
        "out_dir": {"type": "string"},
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "source": {"type": "string"}, "name": _opt_str, "n": _int, "n_test": _int,
                "noise_sd": _num, "test_fraction": _num, "path": _opt_str, "test_path": _opt_str,
                "target_column": {"type": ["string", "integer", "null"]},
                "images": _opt_str, "labels": _opt_str, "test_images": _opt_str, "test_labels": _opt_str,
                "limit": _opt_int, "test_limit": _opt_int, "target": _opt_str,
            },
        },
        "net": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "layer": {"type": "string"}, "nodes": _int, "repeat": _int, "ground_repeat": _int,
                "c": _int, "w": _int, "h": _int, "k": _int, "n_proj": _int, "repeat_proj": _int,
                "D": _int, "T": _num, "steps": _int, "method": {"type": "string"},
                "kind": {"type": "string"}, "theta_cap": _num,
                "input_nodes": _nodes, "readout_nodes": _nodes,
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": _int, "batch_size": _int, "lr": _num, "weight_decay": _num,
                "optimizer": {"type": "string"}, "scheduler": {"type": "boolean"}, "clip": _num,
                "eval_every": _int, "steps_per_epoch": _int, "eval_samples": _int,
                "stop_at": {"type": ["number", "null"]},
            },
        },
    },
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(path, "unknown config section")
        node = node[key]
    node[keys[-1]] = _parse_value(raw)
    return cfg


def _schema_check(raw: dict):
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        key = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            raise ConfigError(key, f"unknown key ({err.message})")
        raise ConfigError(key, err.message)


def resolve_config(raw: dict, overrides=()) -> dict:
    """Merge ``raw`` and ``key=value`` overrides onto the defaults and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {raw.get('version')!r}")
    _schema_check(raw)
    cfg = _merge(DEFAULTS, raw)
    if raw.get("task") in ("generation", "density") and "epochs" not in raw.get("train", {}):
        cfg["train"]["epochs"] = FLOW_DEFAULT_EPOCHS
    for item in overrides:
        apply_override(cfg, item)
    _schema_check(cfg)
    validate_config(cfg)
    return cfg


def load_config(path, overrides=()) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    return resolve_config(raw, overrides)


def bundled_config(name: str) -> dict:
    """Raw dict of a config shipped in ``kirchhoffnet/configs``."""
    text = resources.files("kirchhoffnet").joinpath("configs").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def bundled_config_names() -> list[str]:
    folder = resources.files("kirchhoffnet").joinpath("configs")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _input_dim(cfg) -> int | None:
    data, net = cfg["data"], cfg["net"]
    if data["source"] == "friedman":
        return 5
    if data["source"] in ("gen2d", "density"):
        return 2
    if data["source"] == "idx":
        return net["c"] * net["w"] * net["h"]
    return None


def validate_config(cfg: dict):
    """Cross-field consistency; raises ``ConfigError`` naming the offending key."""
    task, data, net, tr = cfg["task"], cfg["data"], cfg["net"], cfg["train"]
    if task not in TASKS:
        raise ConfigError("task", f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if data["source"] not in SOURCES:
        raise ConfigError("data.source", f"unknown data source {data['source']!r}")
    try:
        kind = DeviceKind.parse(net["kind"])
    except ValueError:
        raise ConfigError("net.kind", f"unknown device kind {net['kind']!r}") from None
    if kind not in LEARNABLE_KINDS:
        raise ConfigError("net.kind", "capacitance is fixed to ground and cannot be a learnable edge")
    if str(net["method"]).lower() not in _ALIASES:
        raise ConfigError("net.method", f"unknown integration method; choose from {', '.join(METHODS)}")
    if net["steps"] < 1:
        raise ConfigError("net.steps", "needs at least one integration step per layer")
    if not net["T"] > 0:
        raise ConfigError("net.T", "layer horizon must be positive")
    if net["D"] < 1:
        raise ConfigError("net.D", "needs at least one layer")
    if not net["theta_cap"] > 0:
        raise ConfigError("net.theta_cap", "ground capacitance must be positive")
    if net["layer"] not in ("fc", "ne", "proj"):
        raise ConfigError("net.layer", f"unknown layer type {net['layer']!r}; choose fc, ne or proj")
    if min(net["repeat"], net["repeat_proj"]) < 1 or net["ground_repeat"] < 0:
        raise ConfigError("net.repeat", "repeat counts must be >= 1 (ground_repeat >= 0)")
    if net["layer"] in ("ne", "proj"):
        if min(net["c"], net["w"], net["h"], net["k"]) < 1 or net["k"] > min(net["w"], net["h"]):
            raise ConfigError("net.k", "kernel must satisfy 1 <= k <= min(w, h)")
    if net["layer"] == "proj" and net["n_proj"] < 1:
        raise ConfigError("net.n_proj", "a projection layer needs at least one projected node")
    if net["layer"] == "fc" and net["nodes"] < 1:
        raise ConfigError("net.nodes", "fc layer needs at least one node")
    if tr["batch_size"] < 1:
        raise ConfigError("train.batch_size", "batch size must be >= 1")
    if tr["epochs"] < 0:
        raise ConfigError("train.epochs", "epochs must be >= 0")
    if not tr["lr"] >= 0:
        raise ConfigError("train.lr", "learning rate must be non-negative")
    if tr["optimizer"] not in ("sgd", "adamw"):
        raise ConfigError("train.optimizer", "optimizer must be sgd or adamw")

    if task == "density":
        if data["source"] != "density":
            raise ConfigError("data.source", "density task draws from a target density; set source to 'density'")
        if data["target"] not in DENSITY_NAMES:
            raise ConfigError("data.target", f"density target must be one of {', '.join(DENSITY_NAMES)}")
    elif data["source"] == "density":
        raise ConfigError("data.source", f"{task} task needs samples, not a target density")
    if data["source"] == "gen2d" and data["name"] not in GEN2D_NAMES:
        raise ConfigError("data.name", f"2-D dataset must be one of {', '.join(GEN2D_NAMES)}")
    if task in ("regression", "classification") and data["source"] == "gen2d":
        raise ConfigError("data.source", f"{task} needs labelled data; gen2d provides samples only")
    if data["source"] == "csv" and not data["path"]:
        raise ConfigError("data.path", "csv source needs a path")
    if data["source"] == "idx" and not (data["images"] and data["labels"]):
        raise ConfigError("data.images", "idx source needs images and labels files")
    if data["source"] == "friedman" and task != "regression":
        raise ConfigError("data.source", "the Friedman generator only supports the regression task")

    if task in ("generation", "density"):
        dim = _input_dim(cfg)
        if net["layer"] != "fc" or (dim is not None and net["nodes"] != dim):
            raise ConfigError("net.nodes", "flow tasks need fc layers whose node count equals the data dimension")
    else:
        dim = _input_dim(cfg)
        if dim is not None and net["layer"] == "fc" and net["nodes"] < dim:
            raise ConfigError("net.nodes", f"{net['nodes']} nodes cannot hold {dim} input features")
        if net["layer"] in ("ne", "proj") and data["source"] == "friedman":
            raise ConfigError("net.layer", "grid layers need image-shaped inputs")
    if task == "classification" and net["layer"] == "proj" and net["readout_nodes"] == "auto" \
            and net["n_proj"] < 2:
        raise ConfigError("net.n_proj", "classification readout on projected nodes needs one per class")


# -- builders -----------------------------------------------------------------

def build_data(cfg: dict):
    """Return ``(train, test, target)``; unused members are ``None``."""
    data, seed = cfg["data"], cfg["seed"]
    src = data["source"]
    if src == "density":
        return None, None, density_target(data["target"])
    if src == "friedman":
        train, test = gen_friedman(data["n"], data["noise_sd"], seed, data["test_fraction"])
        return train, test, None
    if src == "gen2d":
        return gen2d(data["name"], data["n"], seed), gen2d(data["name"], data["n_test"], seed + 1), None
    if src == "csv":
        full = load_csv(data["path"], data["target_column"])
        if data["test_path"]:
            return full, load_csv(data["test_path"], data["target_column"]), None
        train, test = full.split(data["test_fraction"], seed)
        return train, test, None
    train = load_idx(data["images"], data["labels"])
    test = load_idx(data["test_images"], data["test_labels"]) if data["test_images"] else None
    if data["limit"]:
        train = train.subset(slice(0, data["limit"]))
    if test is not None and data["test_limit"]:
        test = test.subset(slice(0, data["test_limit"]))
    if cfg["task"] == "classification":
        for ds in (train, test):
            if ds is not None and ds.targets is not None:
                object.__setattr__(ds, "targets", ds.targets.astype(np.int64))
    return train, test, None


def _layer_topology(net: dict):
    if net["layer"] == "fc":
        topo = fc_topo(net["nodes"], net["repeat"])
    elif net["layer"] == "ne":
        topo = ne_topo(net["c"], net["w"], net["h"], net["k"], net["repeat"])
    else:
        topo = proj_topo(net["c"], net["w"], net["h"], net["k"], net["n_proj"], net["repeat"], net["repeat_proj"])
    if net["ground_repeat"]:
        topo = topo.with_ground_edges(range(topo.num_nodes), net["ground_repeat"])
    return topo


def _num_outputs(cfg, train: Dataset | None) -> int:
    if cfg["task"] == "classification":
        return int(np.max(train.targets)) + 1
    if train is None or train.targets is None:
        return 2
    return 1 if np.ndim(train.targets) == 1 else train.targets.shape[1]


def build_model(cfg: dict, train: Dataset | None = None) -> KirchhoffNet:
    """Initialised network for ``cfg``; readout and input placement follow the task."""
    net = cfg["net"]
    topo = _layer_topology(net)
    n = topo.num_nodes
    in_dim = train.dim if train is not None else 2
    if in_dim > n:
        raise ConfigError("net.nodes", f"{n} nodes cannot hold {in_dim} input features")
    inputs = list(range(in_dim)) if net["input_nodes"] == "auto" else net["input_nodes"]
    if net["readout_nodes"] != "auto":
        readout = net["readout_nodes"]
    elif cfg["task"] in ("generation", "density"):
        readout = list(range(n))
    else:
        n_out = _num_outputs(cfg, train)
        if cfg["task"] == "classification" and net["layer"] == "proj":
            if net["n_proj"] != n_out:
                raise ConfigError("net.n_proj", f"{n_out} classes need {n_out} projected nodes for the readout")
            readout = list(range(n - n_out, n))
        elif cfg["task"] == "classification":
            readout = list(range(n_out))
        else:
            # regression reads the last nodes, which start at 0 V when nodes > inputs
            readout = list(range(n - n_out, n))
    try:
        return build_net([topo] * net["D"], net["kind"], net["T"], net["steps"], cfg["seed"],
                         method=net["method"], input_nodes=inputs, readout_nodes=readout,
                         theta_cap=net["theta_cap"])
    except ValueError as exc:
        raise ConfigError("net", str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(loss=TASK_LOSS[cfg["task"]], epochs=tr["epochs"], batch_size=tr["batch_size"],
                       lr=tr["lr"], seed=cfg["seed"], scheduler=tr["scheduler"], optimizer=tr["optimizer"],
                       weight_decay=tr["weight_decay"], clip=tr["clip"], eval_every=tr["eval_every"],
                       steps_per_epoch=tr["steps_per_epoch"], eval_samples=tr["eval_samples"],
                       stop_at=tr["stop_at"])


def write_resolved(cfg: dict, out_dir) -> Path:
    return atomic_write_text(Path(out_dir) / "config.resolved.json", json.dumps(cfg, indent=2) + "\n")


def run_experiment(cfg: dict, progress=None):
    """Build data and net from a resolved config, train, and write artifacts to ``out_dir``.

    Writes ``config.resolved.json``, ``metrics.csv`` and ``checkpoint.json``;
    returns ``(TrainResult, train, test, target)``.
    """
    from .model import save_checkpoint
    from .training import train

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    train_set, test_set, target = build_data(cfg)
    net = build_model(cfg, train_set)
    result = train(net, train_config(cfg), data=train_set, test=test_set, target=target,
                   metrics_path=out / "metrics.csv", progress=progress)
    save_checkpoint(result.net, out / "checkpoint.json")
    return result, train_set, test_set, target
