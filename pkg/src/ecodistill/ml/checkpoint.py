"""Text checkpoints for trained regressors.

A checkpoint is a JSON document holding the format version, the model kind and
constructor config, the normalization statistics and every weight. Floats are
written with ``repr`` so a save/load round trip reproduces the weights exactly.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import IoError, SchemaMismatch
from .mlp import MlpRegressor, Normalizer
from .sequence import SequenceRegressor

FORMAT = "ecodistill-checkpoint"
VERSION = 1
_KINDS = {"MlpRegressor": MlpRegressor, "SequenceRegressor": SequenceRegressor}


def _encode(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def to_dict(model) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "config": model.config(),
        "x_norm": {"mean": _encode(model.x_norm.mean), "std": _encode(model.x_norm.std)},
        "y_norm": {"mean": _encode(model.y_norm.mean), "std": _encode(model.y_norm.std)},
        "params": {k: _encode(v) for k, v in model.params.items()},
    }


def from_dict(doc: dict):
    if doc.get("format") != FORMAT:
        raise SchemaMismatch("not a model checkpoint")
    if doc.get("version") != VERSION:
        raise SchemaMismatch(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        cls = _KINDS[doc["kind"]]
    except KeyError:
        raise SchemaMismatch(f"unknown model kind {doc.get('kind')!r}") from None
    model = cls(**doc["config"])
    params = {k: _decode(v) for k, v in doc["params"].items()}
    if set(params) != set(model.params):
        raise SchemaMismatch("checkpoint parameters do not match the model layout")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise SchemaMismatch(f"parameter {k} has shape {v.shape}, expected {model.params[k].shape}")
        model.params[k] = v
    model.x_norm = Normalizer(_decode(doc["x_norm"]["mean"]), _decode(doc["x_norm"]["std"]))
    model.y_norm = Normalizer(_decode(doc["y_norm"]["mean"]), _decode(doc["y_norm"]["std"]))
    return model


def save_checkpoint(model, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(to_dict(model), fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)
