"""Versioned JSON checkpoints for single norm layers and whole models.

Floats are written with Python's shortest round-trip repr, so loading gives
back bit-identical values.
"""

from __future__ import annotations

import json
from pathlib import Path

from .baselines import BnState, IterNormState
from .nn import Model
from .swbn import SwbnState

FORMAT = "swbnlab-checkpoint"
VERSION = 1

_LAYER_TYPES = {"swbn": SwbnState, "bn": BnState, "iternorm": IterNormState}


class CheckpointError(ValueError):
    pass


def _kind_of(state) -> str:
    for kind, cls in _LAYER_TYPES.items():
        if isinstance(state, cls):
            return kind
    raise TypeError(f"cannot checkpoint {type(state).__name__}")


def _write(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, allow_nan=False) + "\n")


def _read(path, expected_type: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {payload.get('format')!r}")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')!r}")
    if payload.get("type") != expected_type:
        raise CheckpointError(f"{path}: holds a {payload.get('type')!r}, expected {expected_type!r}")
    return payload


def save_layer(path, state) -> None:
    _write(path, {"format": FORMAT, "version": VERSION, "type": "layer",
                  "kind": _kind_of(state), "state": state.to_dict()})


def load_layer(path):
    payload = _read(path, "layer")
    try:
        cls = _LAYER_TYPES[payload["kind"]]
    except KeyError:
        raise CheckpointError(f"{path}: unknown layer kind {payload.get('kind')!r}") from None
    return cls.from_dict(payload["state"])


def save_model(path, model: Model) -> None:
    _write(path, {"format": FORMAT, "version": VERSION, "type": "model", "model": model.to_dict()})


def load_model(path) -> Model:
    return Model.from_dict(_read(path, "model")["model"])
