"""JSON model files.

Floats are written by :mod:`json`, which uses the shortest repr that
round-trips, so save/load is exact and a re-save is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .estimation import DRVARModel

SCHEMA_VERSION = 1
_REQUIRED = ("schema_version", "n", "r", "p", "A", "alphas", "sigma_diag")


def _matrix(x):
    return None if x is None else np.asarray(x, dtype=float).tolist()


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def model_to_dict(model: DRVARModel, include_residuals: bool = True) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n": model.n,
        "r": model.r,
        "p": model.p,
        "A": _matrix(model.A),
        "alphas": [_matrix(a) for a in model.alphas],
        "sigma_diag": _matrix(model.delta_u),
        "sigma_full": _matrix(model.sigma_u),
        "standardization": _jsonable(model.standardization),
        "names": None if model.names is None else list(model.names),
        "residuals": _matrix(model.residuals) if include_residuals else None,
        "meta": _jsonable(model.meta),
    }


def _array(doc, key, shape):
    try:
        arr = np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r} is not numeric: {exc}") from None
    if arr.shape != shape:
        raise SchemaError(f"field {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def model_from_dict(doc: dict) -> DRVARModel:
    if not isinstance(doc, dict):
        raise SchemaError("model file must hold a JSON object")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise SchemaError(f"model file lacks field(s) {', '.join(missing)}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(
            f"schema version {doc['schema_version']!r} is not supported (expected {SCHEMA_VERSION})"
        )
    try:
        n, r, p = int(doc["n"]), int(doc["r"]), int(doc["p"])
    except (TypeError, ValueError):
        raise SchemaError("n, r and p must be integers") from None
    A = _array(doc, "A", (n, r))
    alphas = [np.array(a, dtype=float) for a in doc["alphas"]]
    if len(alphas) != p or any(a.shape != (r, r) for a in alphas):
        raise SchemaError(f"alphas must be {p} blocks of shape {r}x{r}")
    delta = _array(doc, "sigma_diag", (n,))
    sigma = _array(doc, "sigma_full", (n, n)) if doc.get("sigma_full") is not None else None
    resid = None
    if doc.get("residuals") is not None:
        resid = np.array(doc["residuals"], dtype=float)
        if resid.ndim != 2 or resid.shape[1] != n:
            raise SchemaError("residuals must be a (T-p) x n matrix")
    std = doc.get("standardization")
    std = None if std is None else tuple(tuple(float(v) for v in pair) for pair in std)
    names = doc.get("names")
    return DRVARModel(
        A=A,
        alphas=alphas,
        sigma_u=sigma,
        delta_u=delta,
        residuals=resid,
        xi=None if resid is None else resid @ A,
        meta=dict(doc.get("meta") or {}),
        names=None if names is None else tuple(names),
        standardization=std,
    )


def save_model(model: DRVARModel, path, include_residuals: bool = True) -> None:
    text = json.dumps(model_to_dict(model, include_residuals), sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_model(path) -> DRVARModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a valid model file ({exc.msg} at char {exc.pos})") from None
    return model_from_dict(doc)
