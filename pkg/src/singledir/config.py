"""Experiment configuration: a TOML document mirrored 1:1 by command-line flags.

Every leaf key is unique across sections, so ``--batch-size 64`` overrides
``[train] batch_size``.  Values are checked at parse time and errors name the
offending ``section.key``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import tomli

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    section: str  # "" for top-level keys
    name: str
    kind: str  # int, float, str, bool, ints, floats, scope
    default: Any
    help: str
    check: Callable[[Any], bool] | None = None
    need: str = ""

    @property
    def field(self) -> str:
        return f"{self.section}.{self.name}" if self.section else self.name

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_interval(v):
    return 0.0 <= v <= 1.0


SCHEMA: list[Key] = [
    Key("", "seed", "int", 0, "master seed", _nonneg, "a non-negative integer"),
    Key("", "output_dir", "str", "runs/default", "directory for all outputs"),
    Key("model", "arch", "str", "mlp", "mlp or convnet", lambda v: v in ("mlp", "convnet"), "'mlp' or 'convnet'"),
    Key("model", "hidden", "ints", [512, 512], "MLP hidden widths", lambda v: all(x > 0 for x in v),
        "positive widths"),
    Key("model", "channels", "ints", [64, 64, 128, 128], "convnet channels per conv layer",
        lambda v: len(v) > 0 and all(x > 0 for x in v), "positive channel counts"),
    Key("model", "strides", "ints", [1, 2, 1, 2], "convnet stride per conv layer",
        lambda v: len(v) > 0 and all(x > 0 for x in v), "positive strides"),
    Key("model", "dense_hidden", "ints", [], "convnet dense widths after flattening",
        lambda v: all(x > 0 for x in v), "positive widths"),
    Key("model", "dropout", "float", 0.0, "dropout rate after hidden ReLUs", lambda v: 0.0 <= v < 1.0,
        "a rate in [0, 1)"),
    Key("model", "batchnorm", "bool", False, "batch normalization before ReLUs"),
    Key("data", "source", "str", "mnist", "mnist, cifar10 or blobs",
        lambda v: v in ("mnist", "cifar10", "blobs"), "'mnist', 'cifar10' or 'blobs'"),
    Key("data", "data_dir", "str", None, "data directory (default: $SINGLEDIR_DATA or ./data)"),
    Key("data", "n_train", "int", None, "training examples drawn from the pool", _pos, "a positive integer"),
    Key("data", "n_test", "int", None, "test examples drawn from the pool (default 20%)", _pos,
        "a positive integer"),
    Key("data", "corruption", "float", 0.0, "fraction of training labels shuffled", _unit_interval,
        "a fraction in [0, 1]"),
    Key("data", "corruption_seed", "int", None, "seed for label corruption (default: master seed)", _nonneg,
        "a non-negative integer"),
    Key("data", "n_per_class", "int", 100, "blobs: examples per class", _pos, "a positive integer"),
    Key("data", "classes", "int", 10, "blobs: number of classes", lambda v: v >= 2, "an integer >= 2"),
    Key("data", "dim", "int", 10, "blobs: input dimension", _pos, "a positive integer"),
    Key("data", "separation", "float", 4.0, "blobs: distance between adjacent class means", _nonneg,
        "a non-negative number"),
    Key("train", "lr", "float", 0.05, "SGD learning rate", _pos, "a positive number"),
    Key("train", "batch_size", "int", 32, "minibatch size", _pos, "a positive integer"),
    Key("train", "epochs", "int", 10, "maximum training epochs", _nonneg, "a non-negative integer"),
    Key("train", "target_acc", "float", None, "stop once training accuracy reaches this", _unit_interval,
        "a fraction in [0, 1]"),
    Key("analysis", "scope", "scope", "all", "layer scope: all, conv, lastN or comma-separated layer indices"),
    Key("analysis", "orderings", "int", 10, "random unit orderings per curve", _pos, "a positive integer"),
    Key("analysis", "clamp", "str", "zero", "clamp value: zero or mean", lambda v: v in ("zero", "mean"),
        "'zero' or 'mean'"),
    Key("analysis", "split", "str", "train", "analysis split: train or test", lambda v: v in ("train", "test"),
        "'train' or 'test'"),
    Key("analysis", "points", "int", None, "evaluate the curve at this many evenly spaced counts",
        lambda v: v >= 2, "an integer >= 2"),
    Key("analysis", "scales", "floats", None, "noise scales (default: 17 log-spaced values 1e-2..1e2)",
        lambda v: len(v) > 0 and all(x >= 0 for x in v), "non-negative numbers"),
    Key("analysis", "runs", "int", 10, "noise runs per scale", _pos, "a positive integer"),
    Key("analysis", "bins", "int", 32, "quantile bins for mutual information", lambda v: v >= 2,
        "an integer >= 2"),
    Key("analysis", "probe_every", "int", 10, "epochs between AUC probes", _pos, "a positive integer"),
    Key("analysis", "probe_orderings", "int", 3, "orderings per AUC probe", _pos, "a positive integer"),
    Key("analysis", "probe_units", "int", 0, "units sampled per AUC probe (0 = all)", _nonneg,
        "a non-negative integer"),
    Key("analysis", "probe_points", "int", 9, "count-grid points per AUC probe", lambda v: v >= 2,
        "an integer >= 2"),
    Key("analysis", "delta", "float", 0.02, "AUC drop below the running max that counts as decline",
        _nonneg, "a non-negative number"),
    Key("analysis", "patience", "int", 2, "consecutive declining probes before stopping", _pos,
        "a positive integer"),
    Key("analysis", "jobs", "int", 1, "worker threads", _pos, "a positive integer"),
    Key("sweep", "lrs", "floats", [0.01, 0.05], "sweep learning rates", lambda v: len(v) > 0 and all(x > 0 for x in v),
        "positive numbers"),
    Key("sweep", "batch_sizes", "ints", [32, 128], "sweep batch sizes", lambda v: len(v) > 0 and all(x > 0 for x in v),
        "positive integers"),
    Key("sweep", "repeats", "int", 2, "training repeats per configuration", _pos, "a positive integer"),
    Key("sweep", "subselect", "int", None, "subset size for the subselection experiment", _pos,
        "a positive integer"),
    Key("sweep", "trials", "int", 500, "subselection trials", _pos, "a positive integer"),
    Key("sweep", "topk", "ints", [1, 3], "top-k values scored by subselection",
        lambda v: len(v) > 0 and all(x > 0 for x in v), "positive integers"),
]

KEYS = {k.name: k for k in SCHEMA}
SECTIONS = sorted({k.section for k in SCHEMA if k.section})


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def coerce(key: Key, value):
    """Validate a TOML value (or an already-parsed flag value) for ``key``."""
    if value is None:
        return None
    bad = ConfigError(f"{key.field}: invalid value {value!r}" + (f"; expected {key.need}" if key.need else ""))
    k = key.kind
    if k == "int":
        if not _is_int(value):
            raise bad
    elif k == "float":
        if not _is_num(value):
            raise bad
        value = float(value)
    elif k == "str":
        if not isinstance(value, str):
            raise bad
    elif k == "bool":
        if not isinstance(value, bool):
            raise bad
    elif k == "ints":
        if not isinstance(value, list) or not all(_is_int(x) for x in value):
            raise bad
    elif k == "floats":
        if not isinstance(value, list) or not all(_is_num(x) for x in value):
            raise bad
        value = [float(x) for x in value]
    elif k == "scope":
        if isinstance(value, list):
            if not value or not all(_is_int(x) and x >= 0 for x in value):
                raise bad
        elif not isinstance(value, str):
            raise bad
    if key.check is not None and not key.check(value):
        raise bad
    return value


def parse_flag(key: Key, text: str):
    """Convert a command-line string into the value type of ``key``."""
    bad = ConfigError(f"{key.flag}: cannot parse {text!r}" + (f"; expected {key.need}" if key.need else ""))
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise bad
        if key.kind == "ints":
            return [int(x) for x in text.split(",") if x.strip()]
        if key.kind == "floats":
            return [float(x) for x in text.split(",") if x.strip()]
        if key.kind == "scope":
            if text and all(p.strip().isdigit() for p in text.split(",")):
                return [int(p) for p in text.split(",")]
            return text
    except ValueError:
        raise bad from None
    return text


def defaults() -> dict:
    return {k.name: copy.deepcopy(k.default) for k in SCHEMA}


def read_toml(path) -> dict:
    """Flatten a TOML config into ``{key: value}``, rejecting unknown keys."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    return flatten(doc)


def flatten(doc: dict) -> dict:
    out = {}
    for name, value in doc.items():
        if isinstance(value, dict):
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            for sub, v in value.items():
                key = KEYS.get(sub)
                if key is None or key.section != name:
                    raise ConfigError(f"unknown config key {name}.{sub}")
                out[sub] = coerce(key, v)
        else:
            key = KEYS.get(name)
            if key is None or key.section:
                raise ConfigError(f"unknown config key {name}")
            out[name] = coerce(key, value)
    return out


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> dict:
    """Defaults, then file values, then flags."""
    cfg = defaults()
    for layer in (file_values or {}, flag_values or {}):
        for name, v in layer.items():
            cfg[name] = coerce(KEYS[name], v)
    check_consistency(cfg)
    return cfg


def check_consistency(cfg: dict) -> None:
    if cfg["arch"] == "convnet" and len(cfg["channels"]) != len(cfg["strides"]):
        raise ConfigError(f"model.strides: {len(cfg['strides'])} strides for {len(cfg['channels'])} conv layers")
    if cfg["arch"] == "convnet" and cfg["source"] == "mnist":
        raise ConfigError("model.arch: convnet expects image inputs; use source 'cifar10'")
    topk = cfg["topk"]
    if cfg["subselect"] is not None and max(topk) > cfg["subselect"]:
        raise ConfigError(f"sweep.topk: k={max(topk)} exceeds sweep.subselect={cfg['subselect']}")
    scales = cfg["scales"]
    if scales is not None and any(b < a for a, b in zip(scales, scales[1:])):
        raise ConfigError("analysis.scales: scales must be ascending")


def nested(cfg: dict) -> dict:
    """Section-structured copy of a flat config, for provenance records."""
    out: dict = {}
    for key in SCHEMA:
        target = out.setdefault(key.section, {}) if key.section else out
        target[key.name] = cfg[key.name]
    return out


def to_toml(cfg: dict) -> str:
    """Render a flat config as TOML (``None`` values are omitted)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k.name} = {fmt(cfg[k.name])}" for k in SCHEMA if not k.section and cfg[k.name] is not None]
    for section in SECTIONS:
        lines.append(f"\n[{section}]")
        lines += [f"{k.name} = {fmt(cfg[k.name])}" for k in SCHEMA
                  if k.section == section and cfg[k.name] is not None]
    return "\n".join(lines) + "\n"


def default_output_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"])
