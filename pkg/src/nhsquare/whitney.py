"""Whitney decomposition of bounded open sets and the doubling subfamily."""
from __future__ import annotations

import math
import warnings
from functools import cached_property
from dataclasses import dataclass, field

import numpy as np

from .boxes import box_covered, in_boxes, union_volume
from .dyadic import small_boundary_search
from .measure import AtomicMeasure, Cube, as_points, doubling_check

DILATION = 10.0
RHO = 22.0


class CubeUnionRegion:
    """Finite union of open boxes."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_2d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_2d(np.asarray(hi, dtype=float))
        if self.lo.shape != self.hi.shape or len(self.lo) == 0:
            raise ValueError("need matching nonempty lists of box corners")
        if np.any(self.hi <= self.lo):
            raise ValueError("every box needs hi > lo")
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise ValueError("region must be bounded")

    @classmethod
    def from_cubes(cls, cubes: list[Cube]) -> "CubeUnionRegion":
        return cls([c.lo for c in cubes], [c.hi for c in cubes])

    @property
    def dim(self) -> int:
        return self.lo.shape[1]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.min(axis=0), self.hi.max(axis=0)

    def contains_points(self, points) -> np.ndarray:
        return in_boxes(as_points(points, self.dim), self.lo, self.hi, "open")

    @cached_property
    def _outside_pieces(self):
        """Cells of the edge partition inside the bounding box that miss the region.

        Each cell is a product of edge points and open gaps; it is stored as its
        closure bounds plus a per-axis flag telling points from gaps.
        """
        axes_c, axes_lo, axes_hi, axes_pt = [], [], [], []
        for i in range(self.dim):
            e = np.unique(np.concatenate([self.lo[:, i], self.hi[:, i]]))
            mids = (e[:-1] + e[1:]) / 2
            axes_c.append(np.concatenate([e, mids]))
            axes_lo.append(np.concatenate([e, e[:-1]]))
            axes_hi.append(np.concatenate([e, e[1:]]))
            axes_pt.append(np.concatenate([np.ones(len(e), bool), np.zeros(len(mids), bool)]))
        mesh = lambda arrs: np.stack([g.reshape(-1) for g in np.meshgrid(*arrs, indexing="ij")], axis=1)
        reps = mesh(axes_c)
        out = ~in_boxes(reps, self.lo, self.hi, "open")
        return mesh(axes_lo)[out], mesh(axes_hi)[out], mesh(axes_pt)[out]

    def contains_box(self, lo, hi) -> bool:
        """Is the closed box [lo, hi] inside the region?"""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        blo, bhi = self.bounds
        if np.any(lo <= blo) or np.any(hi >= bhi):
            return False
        plo, phi, ppt = self._outside_pieces
        meets = np.where(ppt, (lo <= plo) & (plo <= hi), (lo < phi) & (hi > plo))
        return not bool(np.any(np.all(meets, axis=1)))

    def dist_to_complement(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if not self.contains_box(x, x):
            return 0.0
        blo, bhi = self.bounds
        d = float(np.min(np.minimum(x - blo, bhi - x)))
        plo, phi, _ = self._outside_pieces
        if len(plo):
            gap = np.maximum(np.maximum(plo - x, x - phi), 0.0).max(axis=1)
            d = min(d, float(gap.min()))
        return d

    def meets_box(self, lo, hi) -> bool:
        """Does the open box (lo, hi) meet the region?"""
        return bool(np.any(np.all((self.lo < hi) & (self.hi > lo), axis=1)))

    def volume(self) -> float:
        return union_volume(self.lo, self.hi)


class GridRegion:
    """Interior of a union of closed lattice cells of side ``cell`` anchored at ``origin``."""

    def __init__(self, origin, cell: float, marked):
        self.origin = np.asarray(origin, dtype=float).reshape(-1)
        self.cell = float(cell)
        self.marked = np.asarray(marked, dtype=bool)
        if self.marked.ndim != len(self.origin):
            raise ValueError("mask dimension does not match origin")
        if not self.marked.any():
            raise ValueError("empty region")

    @property
    def dim(self) -> int:
        return len(self.origin)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.argwhere(self.marked)
        return self.origin + self.cell * idx.min(axis=0), self.origin + self.cell * (idx.max(axis=0) + 1)

    def _cells_meeting(self, lo, hi):
        """Index ranges of cells whose closures meet the closed box [lo, hi]."""
        a = np.ceil((np.asarray(lo) - self.origin) / self.cell).astype(int) - 1
        b = np.floor((np.asarray(hi) - self.origin) / self.cell).astype(int)
        return a, b

    def contains_box(self, lo, hi) -> bool:
        a, b = self._cells_meeting(lo, hi)
        shape = np.asarray(self.marked.shape)
        if np.any(a < 0) or np.any(b >= shape):
            return False
        sl = tuple(slice(int(i), int(j) + 1) for i, j in zip(a, b))
        return bool(self.marked[sl].all())

    def contains_points(self, points) -> np.ndarray:
        return np.array([self.contains_box(p, p) for p in as_points(points, self.dim)], dtype=bool)

    def meets_box(self, lo, hi) -> bool:
        a = np.floor((np.asarray(lo) - self.origin) / self.cell).astype(int)
        b = np.ceil((np.asarray(hi) - self.origin) / self.cell).astype(int) - 1
        a = np.maximum(a, 0)
        b = np.minimum(b, np.asarray(self.marked.shape) - 1)
        if np.any(b < a):
            return False
        sl = tuple(slice(int(i), int(j) + 1) for i, j in zip(a, b))
        return bool(self.marked[sl].any())

    def volume(self) -> float:
        return float(self.marked.sum()) * self.cell**self.dim


def superlevel_region(points, values, xi: float, cell: float, origin=None) -> GridRegion:
    """Region built from the lattice cells containing probes with value > xi."""
    pts = as_points(points)
    vals = np.asarray(values, dtype=float)
    hot = pts[vals > xi]
    if len(hot) == 0:
        raise ValueError("superlevel set is empty")
    if origin is None:
        origin = np.floor(pts.min(axis=0) / cell) * cell - cell
    origin = np.asarray(origin, dtype=float)
    top = np.floor((pts.max(axis=0) - origin) / cell).astype(int) + 2
    mask = np.zeros(tuple(top), dtype=bool)
    idx = np.floor((hot - origin) / cell).astype(int)
    mask[tuple(idx.T)] = True
    return GridRegion(origin, cell, mask)


def region_from_config(cfg: dict):
    kind = cfg.get("type")
    if kind == "cube_union":
        boxes = cfg["cubes"]
        return CubeUnionRegion([b["lo"] for b in boxes], [b["hi"] for b in boxes])
    if kind == "superlevel":
        return superlevel_region(cfg["points"], cfg["values"], cfg["xi"], cfg["cell"], cfg.get("origin"))
    raise ValueError(f"unknown region type {kind!r}")


def dist_to_complement(region, x, iters: int = 60) -> float:
    """sup{r : closed B(x, r) inside the region}, by bisection on exact containment."""
    if hasattr(region, "dist_to_complement"):
        return region.dist_to_complement(x)
    x = np.asarray(x, dtype=float)
    if not region.contains_box(x, x):
        return 0.0
    lo_b, hi_b = region.bounds
    lo, hi = 0.0, float(np.max(hi_b - lo_b))
    for _ in range(iters):
        mid = (lo + hi) / 2
        if region.contains_box(x - mid, x + mid):
            lo = mid
        else:
            hi = mid
    return hi


@dataclass
class WhitneyFamily:
    keys: list[tuple[int, tuple[int, ...]]]
    cubes: list[Cube]
    rho: float
    rho0: int
    side_ratio: float
    residual_volume: float
    report: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cubes": [{"level": l, "index": list(i)} for l, i in self.keys],
            "report": self.report,
        }


def lattice_cube(level: int, index) -> Cube:
    s = 2.0**-level
    lo = np.asarray(index, dtype=float) * s
    return Cube(tuple(lo + s / 2), s)


def _overlaps(cubes: list[Cube], dil: float):
    """For each cube, the count of cubes whose dil-dilates meet its dil-dilate and the worst side ratio."""
    c = np.array([q.c for q in cubes])
    s = np.array([q.side for q in cubes])
    counts = np.zeros(len(cubes), dtype=int)
    ratio = 1.0
    for i in range(len(cubes)):
        meet = np.max(np.abs(c - c[i]), axis=1) <= dil / 2 * (s + s[i]) * (1 + 1e-12)
        counts[i] = int(meet.sum())
        ratio = max(ratio, float(np.max(np.maximum(s[meet] / s[i], s[i] / s[meet]))))
    return counts, ratio


def whitney_decompose(region, depth: int, probes=None) -> WhitneyFamily:
    """Maximal standard dyadic cubes Q with closure(10 Q) inside the region, down to side 2^-depth."""
    if not hasattr(region, "contains_box"):
        raise ValueError("region must be a bounded open region")
    lo_b, hi_b = region.bounds
    ext = float(np.max(hi_b - lo_b))
    j0 = -math.ceil(math.log2(ext))
    if depth < j0:
        raise ValueError("depth is coarser than the region itself")
    s0 = 2.0**-j0
    a = np.floor(lo_b / s0).astype(int)
    b = np.ceil(hi_b / s0).astype(int)
    ranges = [range(int(i), int(j)) for i, j in zip(a, b)]
    stack = [(j0, idx) for idx in np.array(np.meshgrid(*ranges, indexing="ij")).reshape(len(ranges), -1).T.tolist()]
    stack = [(l, tuple(i)) for l, i in stack]
    keys, leftovers = [], []
    dim = region.dim
    offs = np.array(np.meshgrid(*([[0, 1]] * dim), indexing="ij")).reshape(dim, -1).T
    while stack:
        level, idx = stack.pop()
        q = lattice_cube(level, idx)
        if not region.meets_box(q.lo, q.hi):
            continue
        big = q.scaled(DILATION)
        if region.contains_box(big.lo, big.hi):
            keys.append((level, idx))
        elif level < depth:
            base = np.asarray(idx) * 2
            stack.extend((level + 1, tuple(int(v) for v in base + o)) for o in offs)
        else:
            leftovers.append(q)
    keys.sort()
    cubes = [lattice_cube(l, i) for l, i in keys]
    if not cubes:
        raise ValueError("depth insufficient: no Whitney cube fits inside the region")
    # leftovers are distinct cells of the finest level, hence disjoint
    residual = float(sum(q.side ** q.dim for q in leftovers))
    if probes is not None:
        pts = as_points(probes, dim)
        inside = region.contains_points(pts)
        covered = in_boxes(pts, np.array([q.lo for q in cubes]), np.array([q.hi for q in cubes]), "halfopen")
        missing = pts[inside & ~covered]
        if len(missing):
            raise ValueError(f"depth insufficient; uncovered points: {missing.tolist()}")
    fam = WhitneyFamily(keys, cubes, 0.0, 0, 1.0, residual)
    fam.report = validate_whitney(region, fam)
    fam.rho = fam.report["p2_rho"]["value"]
    fam.rho0 = fam.report["p3_overlap"]["value"]
    fam.side_ratio = fam.report["p3_overlap"]["side_ratio"]
    return fam


def validate_whitney(region, fam: WhitneyFamily, rho_bound: float = RHO,
                     rho0_bound: int | None = None) -> dict:
    """Re-check the three Whitney properties from scratch."""
    inside = all(region.contains_box(q.scaled(DILATION).lo, q.scaled(DILATION).hi) for q in fam.cubes)
    maximal = True
    for l, i in fam.keys:
        p = lattice_cube(l - 1, tuple(v >> 1 for v in i)).scaled(DILATION)
        if region.contains_box(p.lo, p.hi):
            maximal = False
            break
    keyset = set(fam.keys)
    top = min(l for l, _ in fam.keys)
    nested = any((l - k, tuple(v >> k for v in i)) in keyset
                 for l, i in fam.keys for k in range(1, l - top + 1))
    rho = max(2 * dist_to_complement(region, q.c) / q.side for q in fam.cubes)
    counts, ratio = _overlaps(fam.cubes, DILATION)
    vol_cubes = float(sum(q.side ** q.dim for q in fam.cubes))
    vol_region = region.volume()
    rho0 = int(counts.max())
    return {
        "p1_inside": {"pass": bool(inside and maximal and not nested), "maximal": maximal},
        "p2_rho": {"pass": bool(rho <= rho_bound), "value": rho, "bound": rho_bound},
        "p3_overlap": {
            "pass": bool(rho0_bound is None or rho0 <= rho0_bound),
            "value": rho0,
            "bound": rho0_bound,
            "side_ratio": ratio,
        },
        "volume": {"cubes": vol_cubes, "region": vol_region, "residual": fam.residual_volume},
        "count": len(fam.cubes),
    }


@dataclass
class Subfamily:
    cubes: list[Cube]
    sources: list[int]
    coverage: float
    target: float
    skipped: list[int]

    @property
    def passed(self) -> bool:
        return self.coverage >= self.target


def select_doubling_subfamily(mu: AtomicMeasure, fam: WhitneyFamily, region,
                              beta_doubling: tuple[float, float] | None = None,
                              C_small: float = 64.0, candidates: int = 11) -> Subfamily:
    """Disjoint doubling, small-boundary dilates of Whitney cubes, chosen greedily by mass."""
    a, b = beta_doubling or (9.0, 2.0 * fam.rho0)
    in_region = region.contains_points(mu.points) if len(mu) else np.zeros(0, dtype=bool)
    total = float(mu.weights[in_region].sum())
    picks: list[tuple[float, tuple, int, Cube]] = []
    skipped = []
    h = mu.resolution
    for j, (q, key) in enumerate(zip(fam.cubes, fam.keys)):
        if mu.mass_in(q.scaled(1.1)) <= 0:
            continue
        # every mass the search looks at lies in max(a, 2) * 1.1 q
        near = q.scaled(1.1 * max(a, 2.0)).contains(mu.points)
        local = AtomicMeasure(mu.points[near], mu.weights[near], h)
        res = small_boundary_search(
            local, q, (1.0, 1.1), C_small, candidates,
            admissible=lambda c, m=local: m.mass_in(c) > 0 and doubling_check(m, c, a, b),
        )
        if not res.passed:
            skipped.append(j)
            continue
        picks.append((-mu.mass_in(q.scaled(1.1)), key, j, res.cube))
    if skipped:
        warnings.warn(f"{len(skipped)} Whitney cubes had no admissible dilate", stacklevel=2)
    picks.sort(key=lambda p: (p[0], p[1]))
    chosen: list[Cube] = []
    sources = []
    clo = np.zeros((0, mu.dim))
    chi = np.zeros((0, mu.dim))
    for _, _, j, c in picks:
        # disjoint closed cubes: a positive gap along some axis
        gap = np.maximum(clo - c.hi, c.lo - chi).max(axis=1) if len(clo) else np.zeros(0)
        if np.all(gap > 0):
            chosen.append(c)
            sources.append(j)
            clo = np.vstack([clo, c.lo])
            chi = np.vstack([chi, c.hi])
    covered = np.zeros(len(mu), dtype=bool)
    for c in chosen:
        covered |= c.contains(mu.points)
    got = float(mu.weights[covered].sum())
    coverage = got / total if total > 0 else 1.0
    return Subfamily(chosen, sources, coverage, 1.0 / (8 * fam.rho0), skipped)
