"""Exact containment tests for unions of axis-parallel boxes.

Membership in a finite union of boxes is constant on every cell of the
product partition induced by the box edges, so testing one representative
per cell decides containment exactly.
"""
from __future__ import annotations

import numpy as np

KINDS = ("open", "closed", "halfopen")


def in_boxes(points: np.ndarray, lo: np.ndarray, hi: np.ndarray, kinds) -> np.ndarray:
    """Mask of points lying in at least one box."""
    points = np.atleast_2d(points)
    if len(lo) == 0:
        return np.zeros(len(points), dtype=bool)
    kinds = np.broadcast_to(np.asarray(kinds), (len(lo),))
    p = points[:, None, :]
    res = np.zeros((len(points), len(lo)), dtype=bool)
    for kind in KINDS:
        sel = kinds == kind
        if not sel.any():
            continue
        l, h = lo[sel][None], hi[sel][None]
        if kind == "open":
            m = (p > l) & (p < h)
        elif kind == "closed":
            m = (p >= l) & (p <= h)
        else:
            m = (p >= l) & (p < h)
        res[:, sel] = np.all(m, axis=2)
    return res.any(axis=1)


def _axis_reps(a: float, b: float, edges: np.ndarray, include_b: bool) -> np.ndarray:
    crit = np.unique(np.concatenate([[a, b], edges[(edges > a) & (edges < b)]]))
    mids = (crit[:-1] + crit[1:]) / 2
    pts = crit if include_b else crit[:-1]
    if a == b:
        return np.array([a])
    return np.sort(np.concatenate([pts, mids]))


def box_covered(qlo, qhi, lo: np.ndarray, hi: np.ndarray, kinds, query: str = "closed",
                chunk: int = 200_000) -> bool:
    """Is the query box (closed or half-open) inside the union of the given boxes?"""
    qlo = np.asarray(qlo, dtype=float)
    qhi = np.asarray(qhi, dtype=float)
    lo = np.asarray(lo, dtype=float).reshape(-1, len(qlo))
    hi = np.asarray(hi, dtype=float).reshape(-1, len(qlo))
    kinds = np.broadcast_to(np.asarray(kinds), (len(lo),))
    near = np.all((lo <= qhi) & (hi >= qlo), axis=1)
    lo, hi, kinds = lo[near], hi[near], kinds[near]
    if len(lo) == 0:
        return False
    axes = [
        _axis_reps(qlo[i], qhi[i], np.concatenate([lo[:, i], hi[:, i]]), query == "closed")
        for i in range(len(qlo))
    ]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    for s in range(0, len(pts), chunk):
        if not in_boxes(pts[s:s + chunk], lo, hi, kinds).all():
            return False
    return True


def union_volume(lo: np.ndarray, hi: np.ndarray) -> float:
    """Lebesgue measure of a union of boxes by coordinate compression."""
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    if len(lo) == 0:
        return 0.0
    n = lo.shape[1]
    axes = [np.unique(np.concatenate([lo[:, i], hi[:, i]])) for i in range(n)]
    mids = [(a[:-1] + a[1:]) / 2 for a in axes]
    widths = [np.diff(a) for a in axes]
    grids = np.meshgrid(*mids, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    vol = np.ones(pts.shape[0])
    wg = np.meshgrid(*widths, indexing="ij")
    for w in wg:
        vol *= w.reshape(-1)
    return float(vol[in_boxes(pts, lo, hi, "open")].sum())
