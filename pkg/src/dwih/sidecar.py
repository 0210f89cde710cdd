"""JSON sidecars tying HVOL files to b-values and provenance.

A series sidecar looks like::

    {
      "b_values": [50, 800, 1500],
      "low_b": 50,
      "high_b": 800,
      "volumes": {"50": "b50.hvol", "800": "b800.hvol", "1500": "b1500.hvol"},
      "pirads": {"1": 4},              # optional, lesion label -> PI-RADS
      "provenance": {...}              # optional, free-form
    }

Volume paths are resolved relative to the sidecar's directory.

Dynamic-filter layers are stored as one flat float32 HVOL per tensor plus a
``layer.json`` recording each tensor's file and shape.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

from dwih.errors import FormatError, InputError
from dwih.hvol import read_hvol, write_hvol
from dwih.signal_model import DwiObservation, DwiSeries, MetaInfo
from dwih.volume import Volume3D


def _b_key(b: float) -> str:
    return str(int(b)) if float(b).is_integer() else repr(float(b))


def load_series(path) -> tuple[DwiSeries, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    for key in ("b_values", "volumes"):
        if key not in doc:
            raise FormatError(f"{path}: missing '{key}'")
    volumes = {float(k): v for k, v in doc["volumes"].items()}
    b_values = [float(b) for b in doc["b_values"]]
    if sorted(b_values) != sorted(volumes):
        raise FormatError(f"{path}: b_values {b_values} do not match volume keys {sorted(volumes)}")
    obs = []
    for b in b_values:
        vol_path = path.parent / volumes[b]
        if not vol_path.exists():
            raise InputError(f"{path}: volume file {vol_path} does not exist")
        obs.append(DwiObservation(b, read_hvol(vol_path)))
    meta = None
    if "low_b" in doc or "high_b" in doc:
        meta = MetaInfo(doc["low_b"], doc["high_b"])
    return DwiSeries(tuple(obs), meta), doc


def save_series(directory, series: DwiSeries, pirads: dict | None = None, provenance: dict | None = None) -> Path:
    """Write one ``b<value>.hvol`` per observation plus ``series.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    volumes = {}
    for o in series.observations:
        name = f"b{_b_key(o.b_value)}.hvol"
        write_hvol(directory / name, o.volume)
        volumes[_b_key(o.b_value)] = name
    doc = {"b_values": [float(b) for b in series.b_values], "volumes": volumes}
    if series.meta is not None:
        doc["low_b"] = series.meta.low_b
        doc["high_b"] = series.meta.high_b
    if pirads is not None:
        doc["pirads"] = {str(k): int(v) for k, v in pirads.items()}
    if provenance is not None:
        doc["provenance"] = provenance
    out = directory / "series.json"
    write_json(out, doc)
    return out


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):  # numpy scalars
        return _jsonable(obj.item())
    if isinstance(obj, os.PathLike):
        return os.fspath(obj)
    return obj


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n")


_LAYER_TENSORS = ("base_weights", "base_bias", "controller_weights", "controller_bias")


def save_layer(directory, layer) -> Path:
    """Write a :class:`~dwih.dynamic_filter.DynamicConvLayer` (narrowed to float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = dict(zip(_LAYER_TENSORS, (layer.base_weights, layer.base_bias, layer.controller.weights, layer.controller.bias)))
    tensors = {}
    for name, arr in arrays.items():
        flat = np.ascontiguousarray(arr, dtype=np.float32).reshape(1, 1, -1)
        write_hvol(directory / f"{name}.hvol", Volume3D(flat, (1.0, 1.0, 1.0)))
        tensors[name] = {"file": f"{name}.hvol", "shape": list(arr.shape)}
    out = directory / "layer.json"
    write_json(out, {"tensors": tensors})
    return out


def load_layer(path):
    """Inverse of :func:`save_layer`; ``path`` is the ``layer.json`` file."""
    from dwih.dynamic_filter import Controller, DynamicConvLayer

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = {name: doc["tensors"][name] for name in _LAYER_TENSORS}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a layer sidecar ({exc})") from None
    arrays = {}
    for name, entry in entries.items():
        data = read_hvol(path.parent / entry["file"]).data
        shape = tuple(int(n) for n in entry["shape"])
        if data.size != int(np.prod(shape)):
            raise FormatError(f"{path}: {name} holds {data.size} values, shape {shape} needs {int(np.prod(shape))}")
        arrays[name] = data.reshape(shape).copy()
    ctrl = Controller(arrays["controller_weights"], arrays["controller_bias"])
    return DynamicConvLayer(arrays["base_weights"], arrays["base_bias"], ctrl)
