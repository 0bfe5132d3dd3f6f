"""Experiment configuration: built-in presets overridden by a TOML file.

Schema (every key optional; unknown keys are rejected)::

    [experiment]  task, seed, out
    [data]        dir, n_train, n_val, n_test, noise
    [encoder]     offset, scale
    [network]     layers = [{kind, units | channels, threshold, relu,
                             kernel, stride, size, normalization}, ...]
                  init_mean, init_std, max_delay, time_out_factor
    [train]       lr, beta1, beta2, adam_eps, batch_size, epochs, lr_decay,
                  standardize_logits, logit_scale, eval_batch
    [sweep]       gammas, layer, mode ("evaluate" | "train"), epochs, n_eval
    [fabric]      q, delta, n_samples
    [patterns]    n_samples, bins
    [dynamics]    rates_hz, gammas, duration_ms, window_ms, leak_offset, poisson
    [lif]         n_instances, n_arrivals, spread, tau_s, tau_m_factor, v_th, C_m

``task`` selects the preset: xor, moon, mnist-dense, mnist-conv,
mnist-conv2, gamma-sweep, dynamics-demo, lif-battery.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Bad configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _dense(units, threshold, relu=True, normalization="none"):
    return {"kind": "dense", "units": units, "threshold": threshold, "relu": relu,
            "normalization": normalization}


BASE = {
    "experiment": {"task": "xor", "seed": 0, "out": "runs"},
    "data": {"dir": "", "n_train": 60000, "n_val": 2000, "n_test": 10000, "noise": 0.1},
    "encoder": {"offset": 1.0, "scale": 1.0},
    "network": {
        "layers": [_dense(10, 1.0), _dense(2, 2.0, relu=False)],
        "init_mean": 0.5, "init_std": 0.5, "max_delay": 2.5, "time_out_factor": 4.0,
    },
    "train": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "batch_size": 128,
              "epochs": 20, "lr_decay": 0.0, "standardize_logits": True, "logit_scale": 6.0,
              "eval_batch": 1000},
    "sweep": {"gammas": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0], "layer": 0, "mode": "evaluate",
              "epochs": 5, "n_eval": 2000},
    "fabric": {"q": 8, "delta": 0.0, "n_samples": 100},
    "patterns": {"n_samples": 1000, "bins": 30},
    "dynamics": {"rates_hz": [50.0, 10.0, 5.0], "gammas": [10.0, 40.0, 80.0], "duration_ms": 500.0,
                 "window_ms": 100.0, "leak_offset": 30.0, "poisson": False},
    "lif": {"n_instances": 500, "n_arrivals": 6, "spread": 1.0, "tau_s": 50.0, "tau_m_factor": 4.0,
            "v_th": 2.0, "C_m": 1.0},
}

PRESETS = {
    "xor": {},
    "moon": {
        "data": {"n_train": 20000, "n_val": 2000, "n_test": 10000, "noise": 0.1},
        "encoder": {"offset": 2.0},
        "network": {"layers": [_dense(10, 1.0), _dense(20, 1.0), _dense(2, 2.0, relu=False)]},
        "train": {"lr": 0.03, "epochs": 20, "batch_size": 128},
    },
    "mnist-dense": {
        "data": {"n_train": None, "n_val": 5000, "n_test": None},
        "network": {"layers": [_dense(100, 30.0), _dense(10, 2.0, relu=False)],
                    "init_mean": 0.5, "init_std": 0.1},
        "train": {"lr": 1e-3, "epochs": 30, "batch_size": 32},
        "sweep": {"gammas": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]},
    },
    "mnist-conv": {
        "data": {"n_train": None, "n_val": 5000, "n_test": None},
        "network": {"layers": [
            {"kind": "conv2d", "channels": 6, "kernel": [3, 3], "stride": 1, "threshold": 1.0},
            {"kind": "maxpool", "size": 2},
            _dense(15, 10.0),
            _dense(10, 2.0, relu=False, normalization="batch_norm")],
            "init_mean": 0.5, "init_std": 0.1},
        "train": {"lr": 5e-5, "epochs": 30, "batch_size": 32},
    },
    "mnist-conv2": {
        "data": {"n_train": None, "n_val": 5000, "n_test": None},
        "network": {"layers": [
            {"kind": "conv2d", "channels": 16, "kernel": [3, 3], "stride": 1, "threshold": 1.0,
             "normalization": "batch_norm"},
            {"kind": "maxpool", "size": 2},
            {"kind": "conv2d", "channels": 32, "kernel": [3, 3], "stride": 1, "threshold": 1.0,
             "normalization": "batch_norm"},
            {"kind": "maxpool", "size": 2},
            _dense(500, 1.0, normalization="batch_norm"),
            _dense(10, 2.0, relu=False, normalization="batch_norm")],
            "init_mean": 0.5, "init_std": 0.1},
        "train": {"lr": 1e-3, "epochs": 30, "batch_size": 16, "lr_decay": 1e-4},
    },
    "gamma-sweep": {
        "data": {"n_train": 20000, "n_val": 1000, "n_test": 5000},
        "sweep": {"gammas": [0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 35.0], "mode": "train",
                  "epochs": 5},
    },
    "dynamics-demo": {},
    "lif-battery": {},
}

MNIST_TASKS = ("mnist-dense", "mnist-conv", "mnist-conv2")
LAYER_KEYS = {"kind", "units", "channels", "threshold", "relu", "kernel", "stride", "size", "normalization"}
NULLABLE = {("data", "n_train"), ("data", "n_test")}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(p, "unknown field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(p, "expected a table")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_types(cfg: dict, ref: dict, path: str = "") -> None:
    for k, v in cfg.items():
        p = f"{path}.{k}" if path else k
        r = ref[k]
        if isinstance(r, dict):
            _check_types(v, r, p)
            continue
        if v is None:
            if tuple(p.split(".")) not in NULLABLE:
                raise ConfigError(p, "may not be empty")
            continue
        if isinstance(r, bool) or isinstance(v, bool):
            if not (isinstance(r, bool) and isinstance(v, bool)):
                raise ConfigError(p, f"expected {type(r).__name__}")
        elif isinstance(r, float):
            if not isinstance(v, (int, float)):
                raise ConfigError(p, "expected a number")
            cfg[k] = float(v)
        elif isinstance(r, int) or r is None:
            if not isinstance(v, int):
                raise ConfigError(p, "expected an integer")
        elif isinstance(r, str):
            if not isinstance(v, str):
                raise ConfigError(p, "expected a string")
        elif isinstance(r, list):
            if not isinstance(v, list):
                raise ConfigError(p, "expected a list")


def _check_layers(layers) -> None:
    if not layers:
        raise ConfigError("network.layers", "needs at least one layer")
    for i, layer in enumerate(layers):
        p = f"network.layers[{i}]"
        if not isinstance(layer, dict):
            raise ConfigError(p, "expected a table")
        bad = set(layer) - LAYER_KEYS
        if bad:
            raise ConfigError(f"{p}.{sorted(bad)[0]}", "unknown field")
        kind = layer.get("kind")
        if kind not in ("dense", "conv2d", "maxpool"):
            raise ConfigError(f"{p}.kind", "must be dense, conv2d or maxpool")
        if kind != "maxpool":
            th = layer.get("threshold")
            if isinstance(th, bool) or not isinstance(th, (int, float)) or not th > 0:
                raise ConfigError(f"{p}.threshold", "must be a number > 0")
        need = {"dense": "units", "conv2d": "channels"}.get(kind)
        if need and (not isinstance(layer.get(need), int) or layer[need] < 1):
            raise ConfigError(f"{p}.{need}", "must be a positive integer")


def _check_values(cfg: dict) -> None:
    t = cfg["train"]
    if not t["lr"] > 0:
        raise ConfigError("train.lr", "must be > 0")
    if t["batch_size"] < 1:
        raise ConfigError("train.batch_size", "must be >= 1")
    if t["epochs"] < 0:
        raise ConfigError("train.epochs", "must be >= 0")
    if cfg["experiment"]["task"] not in PRESETS:
        raise ConfigError("experiment.task", f"must be one of {sorted(PRESETS)}")
    if cfg["encoder"]["scale"] <= 0:
        raise ConfigError("encoder.scale", "must be > 0")
    if not cfg["sweep"]["gammas"]:
        raise ConfigError("sweep.gammas", "must not be empty")
    if any(not isinstance(g, (int, float)) or isinstance(g, bool) or g <= 0 for g in cfg["sweep"]["gammas"]):
        raise ConfigError("sweep.gammas", "entries must be numbers > 0")
    if cfg["sweep"]["mode"] not in ("evaluate", "train"):
        raise ConfigError("sweep.mode", "must be evaluate or train")
    if any(not isinstance(r, (int, float)) or r <= 0 for r in cfg["dynamics"]["rates_hz"]):
        raise ConfigError("dynamics.rates_hz", "rates must be > 0")
    if not 1 <= cfg["fabric"]["q"] <= 16:
        raise ConfigError("fabric.q", "must be in 1..16")
    _check_layers(cfg["network"]["layers"])


def resolve(user: dict | None = None, task: str | None = None) -> dict:
    """Preset for the task (from ``task`` or ``user``), overridden by ``user``."""
    user = user or {}
    exp = user.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("experiment", "expected a table")
    name = task or exp.get("task") or BASE["experiment"]["task"]
    if name not in PRESETS:
        raise ConfigError("experiment.task", f"must be one of {sorted(PRESETS)}")
    cfg = _merge(BASE, PRESETS[name])
    cfg = _merge(cfg, user)
    cfg["experiment"]["task"] = name
    _check_types(cfg, BASE)
    _check_values(cfg)
    return cfg


def load(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(path), f"not valid TOML ({e})") from None
    except OSError as e:
        raise ConfigError(str(path), f"cannot read ({e.strerror})") from None


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (output and data paths excluded)."""
    c = copy.deepcopy(cfg)
    c["experiment"].pop("out", None)
    c["data"].pop("dir", None)
    return hashlib.sha256(canonical(c).encode()).hexdigest()[:16]
