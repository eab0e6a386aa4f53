"""Random local dyadic grids, good/bad cubes and cube searches."""
from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, NamedTuple

import numpy as np

from .measure import AtomicMeasure, Cube, small_boundary_constant

BAD_SLACK = 1e-12


def grid_exponent(side: float) -> int:
    """N with 2^(N-3) <= side < 2^(N-2)."""
    if not side > 0:
        raise ValueError("seed cube side must be positive")
    _, e = math.frexp(side)  # side = f 2^e, f in [1/2, 1)
    return e - 1 + 3


def sample_shift(rng: np.random.Generator, N: int, dim: int = 1) -> np.ndarray:
    """w uniform on [-2^(N-1), 2^(N-1))^dim."""
    half = 2.0 ** (N - 1)
    return rng.uniform(-half, half, dim)


@dataclass(frozen=True)
class ShiftedGrid:
    """Dyadic lattice generated by the top cube c_Q + w + [-2^N, 2^N)^n."""

    seed: Cube
    w: tuple[float, ...]
    max_depth: int

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(v) for v in np.atleast_1d(self.w)))
        if len(self.w) != self.seed.dim:
            raise ValueError("shift dimension does not match the seed cube")
        if self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        half = 2.0 ** (self.N - 1)
        if any(not (-half <= v < half) for v in self.w):
            raise ValueError(f"shift {self.w} outside [-2^(N-1), 2^(N-1))^n")
        # the seed cube then sits well inside the top cube
        assert max(abs(v) for v in self.w) + self.seed.side / 2 < 2.0**self.N

    @classmethod
    def random(cls, seed: Cube, rng: np.random.Generator, max_depth: int) -> "ShiftedGrid":
        return cls(seed, tuple(sample_shift(rng, grid_exponent(seed.side), seed.dim)), max_depth)

    @property
    def N(self) -> int:
        return grid_exponent(self.seed.side)

    @property
    def dim(self) -> int:
        return self.seed.dim

    @property
    def top_side(self) -> float:
        return 2.0 ** (self.N + 1)

    @property
    def top_lo(self) -> np.ndarray:
        return self.seed.c + np.asarray(self.w) - 2.0**self.N

    def side(self, level: int) -> float:
        return self.top_side / 2.0**level

    @property
    def root(self) -> "DyadicCube":
        return DyadicCube(self, 0, (0,) * self.dim)

    def cube(self, level: int, index) -> "DyadicCube":
        return DyadicCube(self, int(level), tuple(int(i) for i in index))

    def leaf_indices(self, points) -> np.ndarray:
        """Integer cell indices at max_depth; -1 rows for points outside the top cube."""
        p = np.asarray(points, dtype=float).reshape(-1, self.dim)
        rel = np.floor((p - self.top_lo) / self.side(self.max_depth))
        n = 2**self.max_depth
        out = rel.astype(np.int64)
        bad = np.any((rel < 0) | (rel >= n), axis=1)
        out[bad] = -1
        return out

    def indices(self, points, level: int) -> np.ndarray:
        """Cell indices at a level, derived from leaf indices so that levels nest exactly."""
        leaf = self.leaf_indices(points)
        out = leaf >> (self.max_depth - level)
        out[np.any(leaf < 0, axis=1)] = -1
        return out


@dataclass(frozen=True)
class DyadicCube:
    grid: ShiftedGrid
    level: int
    index: tuple[int, ...]

    def __post_init__(self):
        if not 0 <= self.level <= self.grid.max_depth:
            raise ValueError(f"level {self.level} outside [0, {self.grid.max_depth}]")
        n = 2**self.level
        if len(self.index) != self.grid.dim or any(not 0 <= i < n for i in self.index):
            raise ValueError(f"index {self.index} outside level {self.level}")

    def __repr__(self) -> str:
        return f"DyadicCube(level={self.level}, index={self.index})"

    def __lt__(self, other: "DyadicCube") -> bool:
        return (self.level, self.index) < (other.level, other.index)

    @property
    def key(self) -> tuple[int, tuple[int, ...]]:
        return (self.level, self.index)

    @property
    def side(self) -> float:
        return self.grid.side(self.level)

    @property
    def lo(self) -> np.ndarray:
        return self.grid.top_lo + self.side * np.asarray(self.index)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.side

    @property
    def cube(self) -> Cube:
        return Cube(tuple(self.lo + self.side / 2), self.side)

    def contains(self, points) -> np.ndarray:
        idx = self.grid.indices(points, self.level)
        return np.all(idx == np.asarray(self.index), axis=1)

    def children(self) -> list["DyadicCube"]:
        if self.level == self.grid.max_depth:
            return []
        base = np.asarray(self.index) * 2
        offs = np.stack(np.meshgrid(*([[0, 1]] * self.grid.dim), indexing="ij"), -1).reshape(-1, self.grid.dim)
        return [DyadicCube(self.grid, self.level + 1, tuple(base + o)) for o in offs]

    def parent(self) -> "DyadicCube":
        return self.ancestor(1)

    def ancestor(self, k: int) -> "DyadicCube":
        return ancestor(self, k)

    def is_descendant_of(self, other: "DyadicCube") -> bool:
        if other.level > self.level:
            return False
        s = self.level - other.level
        return tuple(i >> s for i in self.index) == other.index


def ancestor(R: DyadicCube, k: int) -> DyadicCube:
    if k < 0 or k > R.level:
        raise ValueError(f"cannot take ancestor {k} of a level-{R.level} cube")
    return DyadicCube(R.grid, R.level - k, tuple(i >> k for i in R.index))


class Goodness(NamedTuple):
    good: bool
    vacuous: bool
    binding_level: int | None

    def __bool__(self) -> bool:
        return self.good


def _admissible_levels(side_I: float, N: int, r: int, max_depth: int) -> list[int]:
    need = 2.0**r * side_I
    return [j for j in range(max_depth + 1) if 2.0 ** (N + 1 - j) >= need * (1 - 1e-15)]


def _bad_flags(I: Cube, top_lo: np.ndarray, N: int, r: int, gamma: float, max_depth: int):
    """Bad flags for a batch of grid origins top_lo (T, n) plus vacuity and binding level."""
    top_lo = np.atleast_2d(top_lo)
    T = len(top_lo)
    side_I = I.side
    levels = _admissible_levels(side_I, N, r, max_depth)
    if not levels:
        return np.zeros(T, dtype=bool), True, np.full(T, -1)
    a = I.lo - top_lo
    b = I.hi - top_lo
    top = 2.0 ** (N + 1)
    outside = np.any((a < 0) | (b > top), axis=1)
    bad = outside.copy()
    binding = np.where(outside, 0, -1)
    for j in levels:
        L = top / 2.0**j
        thr = side_I**gamma * L ** (1 - gamma)
        ka = np.floor(a / L)
        kb = np.floor(b / L)
        crosses = (ka != kb) | (a == ka * L)
        gap = np.minimum(a - ka * L, (ka + 1) * L - b)
        gap = np.where(crosses, 0.0, gap)
        d = gap.min(axis=1)
        hit = d <= thr + BAD_SLACK * L
        binding = np.where(hit & (binding < 0), j, binding)
        bad |= hit
    return bad, False, binding


def is_good(I: Cube, grid: ShiftedGrid, r: int, gamma: float) -> Goodness:
    """I is good iff every admissible grid cube J keeps its boundary far from closure(I)."""
    if I.side > grid.top_side:
        raise ValueError("cube is larger than the top cube of the grid")
    if not 0 < gamma <= 0.5:
        raise ValueError("gamma must lie in (0, 1/2]")
    bad, vac, binding = _bad_flags(I, grid.top_lo, grid.N, r, gamma, grid.max_depth)
    lvl = int(binding[0])
    return Goodness(not bool(bad[0]), vac, None if lvl < 0 else lvl)


def gamma_auto(m: float, alpha: float) -> float:
    return alpha / (2 * (m + alpha))


class BadEstimate(NamedTuple):
    estimate: float
    ci_low: float
    ci_high: float
    trials: int
    vacuous: bool


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    z = NormalDist().inv_cdf(0.5 + level / 2)
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def bad_probability(I: Cube, seed_cube: Cube, r: int, gamma: float, trials: int,
                    rng: np.random.Generator, max_depth: int | None = None) -> BadEstimate:
    """Monte Carlo frequency of shifts making I bad, with a Wilson 95% interval."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    N = grid_exponent(seed_cube.side)
    if max_depth is None:
        max_depth = max(0, round(math.log2(2.0 ** (N + 1) / I.side)))
    half = 2.0 ** (N - 1)
    w = rng.uniform(-half, half, (trials, seed_cube.dim))
    top_lo = seed_cube.c + w - 2.0**N
    bad, vac, _ = _bad_flags(I, top_lo, N, r, gamma, max_depth)
    k = int(bad.sum())
    lo, hi = wilson_interval(k, trials)
    return BadEstimate(k / trials, lo, hi, trials, vac)


def find_doubling_ancestor(mu: AtomicMeasure, Q: Cube, a: float, b: float, k_max: int) -> int:
    """Smallest k in [1, k_max] with a^k Q of positive mass and (a, b)-doubling."""
    for k in range(1, k_max + 1):
        inner = mu.mass_in(Q.scaled(a**k))
        if inner > 0 and mu.mass_in(Q.scaled(a ** (k + 1))) <= b * inner:
            return k
    raise ValueError(f"no ({a}, {b})-doubling dilate of the cube up to k={k_max}")


class SearchResult(NamedTuple):
    cube: Cube
    constant: float
    passed: bool


def small_boundary_search(mu: AtomicMeasure, Q: Cube, scale_range=(1.0, 1.1),
                          C_target: float = math.inf, candidates: int = 11,
                          admissible: Callable[[Cube], bool] | None = None) -> SearchResult:
    """Among lambda Q on a uniform lambda grid, the cube with the least boundary constant.

    A candidate with mu(2 lambda Q) = 0 carries no mass near its boundary and
    scores 0.  ``admissible`` filters candidates (for instance a doubling test);
    when nothing is admissible the seed cube is returned flagged as failing.
    """
    if candidates < 2:
        raise ValueError("need at least two candidates")
    best: SearchResult | None = None
    for lam in np.linspace(scale_range[0], scale_range[1], candidates):
        cand = Q.scaled(float(lam))
        if admissible is not None and not admissible(cand):
            continue
        if mu.mass_in(cand.scaled(2)) > 0:
            const = small_boundary_constant(mu, cand)
        else:
            const = 0.0
        if best is None or const < best.constant:
            best = SearchResult(cand, const, const <= C_target)
    if best is None:
        return SearchResult(Q, math.inf, False)
    return best
