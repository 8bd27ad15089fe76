"""Schema-versioned JSON model documents with 17-significant-digit numbers."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ._core import DataError

SCHEMA = "curveclust.model"
SCHEMA_VERSION = 1


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "NaN"
        if math.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        return format(v, ".17g")
    return json.dumps(str(obj))


def dumps(obj, indent: int = 2) -> str:
    """JSON text in which every float is written with 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _registry():
    from .discriminant import FldaModel, FmdaModel
    from .mixhmmr import MixHMMRParams
    from .mixreg import MixRegParams
    from .mixrhlp import MixRHLPParams, RHLPParams
    from .pwrm import PWRMParams
    return {"mixreg": MixRegParams, "pwrm": PWRMParams, "mixhmmr": MixHMMRParams, "rhlp": RHLPParams,
            "mixrhlp": MixRHLPParams, "flda": FldaModel, "fmda": FmdaModel}


def model_document(params) -> dict:
    doc = params.to_dict()
    return {"schema": SCHEMA, "schema_version": SCHEMA_VERSION, **doc}


def model_from_document(doc: dict):
    if doc.get("schema") != SCHEMA:
        raise DataError("not a curveclust model document")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported model schema version {doc.get('schema_version')}")
    reg = _registry()
    family = doc.get("family")
    if family not in reg:
        raise DataError(f"unknown model family {family!r}")
    return reg[family].from_dict(doc)


def save_model(path, params) -> None:
    write_json(path, model_document(params))


def load_model(path):
    return model_from_document(read_json(path))
