"""Deterministic JSON emission.

World files, checkpoints and session exports are written with floats
rendered at 17 significant digits (lossless for float64) so that
re-running an experiment with the same seed reproduces byte-identical
artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np


def format_float(x: float) -> str:
    """Decimal rendering with 17 significant digits; round-trips float64."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite float in serialized payload")
    if x == int(x) and abs(x) < 1e16:
        # keep integral values readable and unambiguous
        return format(x, ".1f")
    return format(x, ".17g")


def _emit(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(float(obj))
    if isinstance(obj, np.ndarray):
        return _emit(obj.tolist())
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {_emit(v)}" for k, v in obj.items())
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def dumps(obj) -> str:
    return _emit(obj)


def dump(obj, path) -> None:
    Path(path).write_text(_emit(obj) + "\n", encoding="utf-8")


def load(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def content_hash(data) -> str:
    """Short stable hash of a serialized payload (str or bytes)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()[:16]
