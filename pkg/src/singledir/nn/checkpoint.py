"""JSON checkpoints.

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every parameter bit for bit.  No timestamps are stored,
which keeps checkpoints from identical runs byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from .layers import LayerSpec
from .model import Model
from .train import TrainConfig

FORMAT_VERSION = 1


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _array(d: dict) -> np.ndarray:
    a = np.array(d["data"], dtype=np.float64)
    if a.size != int(np.prod(d["shape"])):
        raise DataFormatError(f"tensor data length {a.size} does not match shape {d['shape']}")
    return a.reshape(d["shape"])


def to_document(model: Model, config: TrainConfig | None = None, *, seed: int | None = None,
                epoch: int = 0, extra: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layer_specs": [s.to_dict() for s in model.layers],
        "parameters": [{"layer": i, "name": name, **_tensor(v)}
                       for i, p in enumerate(model.params) for name, v in sorted(p.items())],
        "batchnorm_stats": [{"layer": i, "name": name, **_tensor(v)}
                            for i, b in enumerate(model.buffers) for name, v in sorted(b.items())],
        "train_config": config.to_dict() if config is not None else None,
        "seed": seed if seed is not None else (config.seed if config is not None else None),
        "epoch": epoch,
    }
    if extra:
        doc["extra"] = extra
    return doc


def from_document(doc: dict) -> tuple[Model, TrainConfig | None, dict]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    try:
        specs = [LayerSpec.from_dict(s) for s in doc["layer_specs"]]
        model = Model(doc["input_shape"], specs, seed=None)
        for entry in doc["parameters"]:
            model.params[entry["layer"]][entry["name"]] = _array(entry)
        for entry in doc["batchnorm_stats"]:
            model.buffers[entry["layer"]][entry["name"]] = _array(entry)
    except (KeyError, TypeError, IndexError) as exc:
        raise DataFormatError(f"malformed checkpoint: {exc!r}") from None
    for i, spec in enumerate(specs):
        expected = spec.init_params(np.random.default_rng(0))
        for name, value in expected.items():
            got = model.params[i].get(name)
            if got is None or got.shape != value.shape:
                raise DataFormatError(f"checkpoint parameter {name!r} of layer {i} missing or misshapen")
    cfg = doc.get("train_config")
    config = TrainConfig(**cfg) if cfg else None
    meta = {"seed": doc.get("seed"), "epoch": doc.get("epoch"), "extra": doc.get("extra", {})}
    return model, config, meta


def dumps(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":")) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, model: Model, config: TrainConfig | None = None, **kwargs) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    text = dumps(to_document(model, config, **kwargs))
    atomic_write_text(path, text)
    return hashlib.sha256(text.encode()).hexdigest()


def load(path) -> tuple[Model, TrainConfig | None, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"checkpoint {path} is not valid JSON: {exc}") from None
    return from_document(doc)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
