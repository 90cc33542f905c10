"""Problem, gain and report files.

Problem files are YAML (JSON is accepted, being a subset).  Matrices are
row-major flat lists; signals are ``{kind, params}`` records.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml

from .errors import DimensionMismatch, ProblemFileError
from .model import DeterministicSignal, ProblemSpec

REQUIRED = ("n", "m", "A", "B", "C", "D", "E", "F", "Q", "S", "R")
OPTIONAL = ("q", "r", "b", "sigma", "t0", "x0")
SHAPES = {"A": ("n", "n"), "B": ("n", "m"), "C": ("n", "n"), "D": ("n", "m"),
          "Q": ("n", "n"), "S": ("m", "n"), "R": ("m", "m")}


def _read(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ProblemFileError(f"cannot read {path}: {exc}", operation="load") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ProblemFileError(f"{path} is not valid YAML/JSON: {exc}", operation="load") from exc
    return data


def _matrix(data, name, dims):
    rows, cols = dims
    flat = np.asarray(data[name], dtype=float).ravel()
    if flat.size != rows * cols:
        raise DimensionMismatch(f"{name} has {flat.size} entries, expected {rows}x{cols}",
                                operation="load_problem")
    return flat.reshape(rows, cols)


def problem_from_dict(data):
    if not isinstance(data, dict):
        raise ProblemFileError("problem file must hold a mapping", operation="load_problem")
    unknown = sorted(set(data) - set(REQUIRED) - set(OPTIONAL))
    if unknown:
        raise ProblemFileError(f"unknown fields {unknown}", operation="load_problem")
    missing = [k for k in REQUIRED if k not in data]
    if missing:
        raise ProblemFileError(f"missing fields {missing}", operation="load_problem")
    n, m = data["n"], data["m"]
    if not (isinstance(n, int) and isinstance(m, int) and n > 0 and m > 0):
        raise ProblemFileError("n and m must be positive integers", operation="load_problem")
    size = {"n": n, "m": m}
    kw = {k: _matrix(data, k, (size[a], size[b])) for k, (a, b) in SHAPES.items()}
    for name, dim in (("q", n), ("r", m), ("b", n), ("sigma", n)):
        if data.get(name) is not None:
            kw[name] = DeterministicSignal.from_record(data[name], dim)
    x0 = np.asarray(data.get("x0", np.zeros(n)), dtype=float).ravel()
    if x0.size != n:
        raise DimensionMismatch(f"x0 has {x0.size} entries, expected {n}",
                                operation="load_problem")
    return ProblemSpec(E=float(data["E"]), F=float(data["F"]), t0=float(data.get("t0", 0.0)),
                       x0=x0, **kw)


def load_problem(path):
    return problem_from_dict(_read(path))


def problem_to_dict(spec):
    out = {"n": spec.n, "m": spec.m}
    for k in SHAPES:
        out[k] = np.asarray(getattr(spec, k)).ravel().tolist()
    out["E"], out["F"] = spec.E, spec.F
    for k in ("q", "r", "b", "sigma"):
        out[k] = getattr(spec, k).to_record()
    out["t0"] = spec.t0
    out["x0"] = spec.x0.tolist()
    return out


def dump_problem(spec, path):
    Path(path).write_text(yaml.safe_dump(problem_to_dict(spec), sort_keys=False))


def load_gain(path, spec):
    """Feedback gain and optional offset from a file.

    Accepted content: a flat list (the gain, row-major m x n) or a mapping
    with ``Theta`` (or ``Theta_bar``) and optionally ``v``, a signal record.
    Returns ``(Theta, v)`` where ``v`` may be None.
    """
    data = _read(path)
    v = None
    if isinstance(data, dict):
        unknown = sorted(set(data) - {"Theta", "Theta_bar", "v"})
        if unknown:
            raise ProblemFileError(f"unknown gain fields {unknown}", operation="load_gain")
        key = "Theta" if "Theta" in data else "Theta_bar"
        if key not in data:
            raise ProblemFileError("gain file needs a Theta entry", operation="load_gain")
        theta = data[key]
        if data.get("v") is not None:
            v = DeterministicSignal.from_record(data["v"], spec.m)
    else:
        theta = data
    flat = np.asarray(theta, dtype=float).ravel()
    if flat.size != spec.m * spec.n:
        raise DimensionMismatch(f"gain has {flat.size} entries, expected {spec.m}x{spec.n}",
                                operation="load_gain")
    return flat.reshape(spec.m, spec.n), v


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=False) + "\n")
