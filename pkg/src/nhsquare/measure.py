"""Atomic measures, cubes and the elementary functionals built on them.

All distances are taken in the l-infinity norm, so a ball B(x, r) is the
cube with center x and side 2r.  Ball masses use the closed convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


def as_points(x, dim: int | None = None) -> np.ndarray:
    """Coerce a point or a list of points into a (k, n) float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if dim is None or arr.size == dim else arr.reshape(-1, 1)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must have finite coordinates")
    return arr


def linf_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise l-infinity distances between the rows of a and b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=-1)


@dataclass(frozen=True)
class Cube:
    """Axis-parallel cube ``prod [c_i - side/2, c_i + side/2)``."""

    center: tuple[float, ...]
    side: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if not self.side > 0:
            raise ValueError("cube side must be positive")

    @classmethod
    def ball(cls, x, r: float) -> "Cube":
        return cls(tuple(np.atleast_1d(np.asarray(x, dtype=float))), 2.0 * r)

    @classmethod
    def from_bounds(cls, lo, hi) -> "Cube":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        sides = hi - lo
        if not np.allclose(sides, sides[0], rtol=1e-12, atol=0):
            raise ValueError("bounds do not describe a cube")
        return cls(tuple((lo + hi) / 2), float(sides[0]))

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def radius(self) -> float:
        return self.side / 2

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center)

    @property
    def lo(self) -> np.ndarray:
        return self.c - self.side / 2

    @property
    def hi(self) -> np.ndarray:
        return self.c + self.side / 2

    def scaled(self, a: float) -> "Cube":
        return Cube(self.center, self.side * a)

    def contains(self, points, closed: bool = True) -> np.ndarray:
        """Membership mask; closed by default (ball convention)."""
        p = as_points(points, self.dim)
        d = np.max(np.abs(p - self.c), axis=1)
        if closed:
            return d <= self.radius
        return np.all((p >= self.lo) & (p < self.hi), axis=1)

    def contains_cube(self, other: "Cube") -> bool:
        """Closed containment of other inside self."""
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def dist(self, other: "Cube") -> float:
        """l-infinity distance between the closures (0 when they meet)."""
        gap = np.maximum(other.lo - self.hi, self.lo - other.hi)
        return float(max(np.max(gap), 0.0))

    def boundary_dist(self, points) -> np.ndarray:
        """l-infinity distance from each point to the boundary of the cube."""
        p = as_points(points, self.dim)
        return np.abs(np.max(np.abs(p - self.c) - self.radius, axis=1))


class AtomicMeasure:
    """Finite positive measure given by weighted point atoms."""

    def __init__(self, points, weights, resolution: float | None = None):
        w = np.asarray(weights, dtype=float).reshape(-1)
        if len(w) == 0:
            pts = np.zeros((0, np.asarray(points).shape[-1] if np.asarray(points).ndim == 2 else 1))
        else:
            pts = as_points(points)
            if pts.shape[0] != len(w):
                pts = pts.reshape(len(w), -1)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("atomic measure weights must be finite and nonnegative")
        self.points = pts
        self.weights = w
        self._resolution = resolution
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @classmethod
    def uniform_grid(cls, K: int, dim: int = 1, lo: float = 0.0, hi: float = 1.0) -> "AtomicMeasure":
        """K**dim atoms at lo + i*(hi-lo)/K, total mass (hi-lo)**dim."""
        step = (hi - lo) / K
        axis = lo + step * np.arange(K)
        grids = np.meshgrid(*([axis] * dim), indexing="ij")
        pts = np.stack([g.reshape(-1) for g in grids], axis=1)
        return cls(pts, np.full(len(pts), step**dim), resolution=step)

    def __len__(self) -> int:
        return len(self.weights)

    def __repr__(self) -> str:
        return f"AtomicMeasure(n_atoms={len(self)}, dim={self.dim}, mass={self.mass:.6g})"

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def resolution(self) -> float:
        """Minimum pairwise l-infinity distance (0 for fewer than two atoms)."""
        if self._resolution is not None:
            return float(self._resolution)
        if len(self) < 2:
            return 0.0
        d = linf_dist(self.points, self.points)
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    @cached_property
    def diameter(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.max(self.points.max(axis=0) - self.points.min(axis=0)))

    def scaled(self, c: float) -> "AtomicMeasure":
        return AtomicMeasure(self.points, c * self.weights, self._resolution)

    def restrict(self, mask) -> "AtomicMeasure":
        mask = np.asarray(mask, dtype=bool)
        return AtomicMeasure(self.points[mask], self.weights[mask], self._resolution)

    def mass_in(self, cube: Cube, closed: bool = True) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.weights[cube.contains(self.points, closed=closed)].sum())


class ComplexMeasure:
    """Finite complex measure nu = b d|nu| given by atoms with complex weights."""

    def __init__(self, points, weights):
        w = np.asarray(weights, dtype=complex).reshape(-1)
        if len(w) == 0:
            pts = np.zeros((0, np.asarray(points).shape[-1] if np.asarray(points).ndim == 2 else 1))
        else:
            pts = as_points(points)
            if pts.shape[0] != len(w):
                pts = pts.reshape(len(w), -1)
        if not np.all(np.isfinite(w)):
            raise ValueError("complex measure weights must be finite")
        self.points = pts
        self.weights = w
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @classmethod
    def from_density(cls, f, mu: AtomicMeasure) -> "ComplexMeasure":
        """The measure f dmu."""
        return cls(mu.points, as_values(f, mu) * mu.weights)

    def __len__(self) -> int:
        return len(self.weights)

    def __repr__(self) -> str:
        return f"ComplexMeasure(n_atoms={len(self)}, dim={self.dim}, tv={self.total_variation:.6g})"

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def total_variation(self) -> float:
        return float(np.abs(self.weights).sum())

    def total(self) -> complex:
        return complex(self.weights.sum())

    def abs_measure(self) -> AtomicMeasure:
        return AtomicMeasure(self.points, np.abs(self.weights))

    def phase(self) -> np.ndarray:
        """Density b with nu = b |nu|; atoms of zero weight get b = 1."""
        a = np.abs(self.weights)
        out = np.ones(len(self), dtype=complex)
        nz = a > 0
        out[nz] = self.weights[nz] / a[nz]
        return out

    def scaled(self, c: complex) -> "ComplexMeasure":
        return ComplexMeasure(self.points, c * self.weights)

    def restrict(self, mask) -> "ComplexMeasure":
        mask = np.asarray(mask, dtype=bool)
        return ComplexMeasure(self.points[mask], self.weights[mask])

    def variation_in(self, cube: Cube, closed: bool = True) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.abs(self.weights[cube.contains(self.points, closed=closed)]).sum())


@dataclass(frozen=True)
class SampledFunction:
    """Function values aligned with the atoms of a measure."""

    values: np.ndarray
    measure: AtomicMeasure = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or len(v) != len(self.measure):
            raise ValueError(
                f"function has {v.size} values but its measure has {len(self.measure)} atoms"
            )
        object.__setattr__(self, "values", v)


def as_values(f, mu: AtomicMeasure) -> np.ndarray:
    """Values of f on the atoms of mu, checking the binding."""
    if f is None:
        return np.ones(len(mu))
    if isinstance(f, SampledFunction):
        if f.measure is not mu and len(f.measure) != len(mu):
            raise ValueError("function is bound to a different measure")
        return f.values
    v = np.asarray(f)
    if v.ndim == 0:
        return np.full(len(mu), v[()])
    if v.shape != (len(mu),):
        raise ValueError(f"function has {v.size} values but the measure has {len(mu)} atoms")
    return v


def ball_mass(mu: AtomicMeasure, x, r: float) -> float:
    """mu of the closed ball B(x, r)."""
    if r <= 0:
        raise ValueError("radius must be positive")
    if len(mu) == 0:
        return 0.0
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.max(np.abs(mu.points - x), axis=1)
    return float(mu.weights[d <= r].sum())


def power_bound_constant(mu: AtomicMeasure, m: float, r_lo: float, r_hi: float,
                         sample_count: int = 32) -> float:
    """sup of mu(B(x,r))/r^m over atoms x and a geometric radius grid."""
    if r_lo < mu.resolution or r_lo <= 0:
        raise ValueError(
            f"r_lo={r_lo} is below the atom resolution {mu.resolution}; "
            "atoms break the power bound at that scale"
        )
    if not r_hi > r_lo:
        raise ValueError("need r_hi > r_lo")
    if len(mu) == 0:
        return 0.0
    radii = np.geomspace(r_lo, r_hi, max(int(sample_count), 2))
    d = linf_dist(mu.points, mu.points)
    best = 0.0
    for r in radii:
        masses = (d <= r) @ mu.weights
        best = max(best, float(masses.max()) / r**m)
    return best


def lp_norm(f, mu: AtomicMeasure, p: float) -> float:
    v = np.abs(as_values(f, mu))
    if p == np.inf:
        pos = mu.weights > 0
        return float(v[pos].max()) if pos.any() else 0.0
    if p < 1:
        raise ValueError("p must lie in [1, inf]")
    return float(np.sum(v**p * mu.weights) ** (1.0 / p))


def distribution(f, mu: AtomicMeasure, xi_grid: Sequence[float]) -> list[tuple[float, float]]:
    """Pairs (xi, mu{|f| > xi}) for an increasing grid."""
    xi = np.asarray(list(xi_grid), dtype=float)
    if len(xi) == 0:
        return []
    if np.any(np.diff(xi) <= 0):
        raise ValueError("xi grid must be strictly increasing")
    v = np.abs(as_values(f, mu))
    masses = (v[None, :] > xi[:, None]) @ mu.weights
    return list(zip(xi.tolist(), masses.tolist()))


def maximal_function(f, mu: AtomicMeasure, x) -> float:
    """Centered l-infinity maximal function of f at x."""
    if len(mu) == 0 or mu.mass <= 0:
        raise ValueError("maximal function needs a measure of positive mass")
    v = np.abs(as_values(f, mu))
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.max(np.abs(mu.points - x), axis=1)
    order = np.argsort(d, kind="stable")
    ds = d[order]
    cw = np.cumsum(mu.weights[order])
    cf = np.cumsum((v * mu.weights)[order])
    # a ball's mass changes only at the last atom of each distance tie
    ends = np.append(ds[1:] != ds[:-1], True)
    cw, cf = cw[ends], cf[ends]
    ok = cw > 0
    if not ok.any():
        return 0.0
    return float(np.max(cf[ok] / cw[ok]))


def maximal_function_field(f, mu: AtomicMeasure, xs) -> np.ndarray:
    xs = as_points(xs, mu.dim)
    return np.array([maximal_function(f, mu, x) for x in xs])


def doubling_check(mu: AtomicMeasure, Q: Cube, a: float, b: float) -> bool:
    """True iff mu(aQ) <= b mu(Q)."""
    return mu.mass_in(Q.scaled(a)) <= b * mu.mass_in(Q)


def default_xi_grid(mu: AtomicMeasure, Q: Cube) -> list[float]:
    """Dyadic xi = 2^-j, stopping once xi * side drops below the resolution."""
    h = mu.resolution
    out = [1.0]
    while h > 0 and out[-1] * Q.side / 2 >= h and len(out) < 60:
        out.append(out[-1] / 2)
    return out


def small_boundary_constant(mu: AtomicMeasure, Q: Cube, xi_grid: Iterable[float] | None = None) -> float:
    """max over xi of mu{x in 2Q : dist(x, dQ) <= xi l(Q)} / (xi mu(2Q))."""
    big = Q.scaled(2)
    inside = big.contains(mu.points) if len(mu) else np.zeros(0, dtype=bool)
    total = float(mu.weights[inside].sum())
    if total <= 0:
        raise ValueError("small boundary constant undefined: mu(2Q) = 0")
    if xi_grid is None:
        xi_grid = default_xi_grid(mu, Q)
    xi = np.asarray(list(xi_grid), dtype=float)
    if np.any((xi <= 0) | (xi > 1)):
        raise ValueError("xi grid must lie in (0, 1]")
    bd = Q.boundary_dist(mu.points[inside])
    w = mu.weights[inside]
    shell = (bd[None, :] <= xi[:, None] * Q.side) @ w
    return float(np.max(shell / (xi * total)))
