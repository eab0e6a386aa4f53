"""JSON documents for measures and sampled functions."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .measure import AtomicMeasure, ComplexMeasure


def _weight(w):
    if isinstance(w, (list, tuple)):
        if len(w) != 2:
            raise ValueError(f"complex weight must be [re, im], got {w!r}")
        return complex(float(w[0]), float(w[1]))
    return float(w)


def _encode(z) -> float | list[float]:
    z = complex(z)
    return z.real if z.imag == 0 else [z.real, z.imag]


def measure_from_doc(doc: dict) -> AtomicMeasure | ComplexMeasure:
    """{"dim": n, "atoms": [{"x": [...], "w": real or [re, im]}]}; complex weights give a ComplexMeasure."""
    if "atoms" not in doc:
        raise ValueError("measure document needs an 'atoms' list")
    atoms = doc["atoms"]
    dim = int(doc.get("dim", len(atoms[0]["x"]) if atoms else 1))
    pts = np.array([a["x"] for a in atoms], dtype=float).reshape(-1, dim)
    ws = [_weight(a["w"]) for a in atoms]
    if any(isinstance(w, complex) for w in ws):
        return ComplexMeasure(pts, np.array(ws, dtype=complex))
    return AtomicMeasure(pts, np.array(ws, dtype=float))


def measure_to_doc(m: AtomicMeasure | ComplexMeasure) -> dict:
    return {
        "dim": m.dim,
        "atoms": [{"x": p.tolist(), "w": _encode(w)} for p, w in zip(m.points, m.weights)],
    }


def values_from_doc(doc: dict) -> np.ndarray:
    vals = [_weight(v) for v in doc["values"]]
    if any(isinstance(v, complex) for v in vals):
        return np.array(vals, dtype=complex)
    return np.array(vals, dtype=float)


def values_to_doc(values) -> dict:
    return {"values": [_encode(v) for v in np.asarray(values).tolist()]}


def load_measure(path) -> AtomicMeasure | ComplexMeasure:
    return measure_from_doc(json.loads(Path(path).read_text()))


def save_measure(m, path) -> None:
    Path(path).write_text(json.dumps(measure_to_doc(m), indent=1))


def load_values(path) -> np.ndarray:
    return values_from_doc(json.loads(Path(path).read_text()))


def save_values(values, path) -> None:
    Path(path).write_text(json.dumps(values_to_doc(values), indent=1))
