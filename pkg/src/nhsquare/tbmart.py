"""Stopping and transit cubes, adapted martingale differences and the Tb harnesses."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import box_covered, in_boxes
from .dyadic import DyadicCube, ShiftedGrid, gamma_auto, is_good
from .glstar import OperatorParams, gstar_field, log_grid, simpson, square_integrand
from .kernels import KernelSpec
from .measure import AtomicMeasure, ComplexMeasure, Cube, as_points, as_values, linf_dist

Key = tuple[int, tuple[int, ...]]


class GridAtoms:
    """Assignment of atoms to the cells of a shifted grid, level by level."""

    def __init__(self, grid: ShiftedGrid, points):
        pts = as_points(points, grid.dim)
        leaf = grid.leaf_indices(pts)
        if np.any(leaf < 0):
            raise ValueError("atoms outside the top cube of the grid")
        self.grid = grid
        self.n_atoms = len(pts)
        self.members: list[dict[tuple[int, ...], np.ndarray]] = []
        for level in range(grid.max_depth + 1):
            idx = leaf >> (grid.max_depth - level)
            groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
            for a, row in enumerate(map(tuple, idx.tolist())):
                groups[row].append(a)
            self.members.append({k: np.asarray(v) for k, v in sorted(groups.items())})
        self._children: dict[Key, list[Key]] = defaultdict(list)
        for level in range(1, grid.max_depth + 1):
            for k in self.members[level]:
                self._children[(level - 1, tuple(i >> 1 for i in k))].append((level, k))

    def atoms(self, key: Key) -> np.ndarray:
        level, index = key
        return self.members[level].get(index, np.zeros(0, dtype=int))

    def occupied(self, level: int) -> list[Key]:
        return [(level, k) for k in self.members[level]]

    def children(self, key: Key) -> list[Key]:
        return list(self._children.get(key, ()))

    def leaf_resolved(self) -> bool:
        return all(len(v) <= 1 for v in self.members[-1].values())


def cube_of(grid: ShiftedGrid, key: Key) -> DyadicCube:
    return DyadicCube(grid, key[0], key[1])


def _avg_ratio(f, b, s, ids) -> complex:
    num = np.sum(f[ids] * s[ids])
    den = np.sum(b[ids] * s[ids])
    if den == 0:
        raise ZeroDivisionError
    return num / den


@dataclass
class StoppingFamily:
    cubes: list[DyadicCube]
    threshold: float

    @property
    def keys(self) -> set[Key]:
        return {c.key for c in self.cubes}

    def contains_points(self, points) -> np.ndarray:
        if not self.cubes:
            return np.zeros(len(as_points(points)), dtype=bool)
        grid = self.cubes[0].grid
        out = np.zeros(len(as_points(points, grid.dim)), dtype=bool)
        for c in self.cubes:
            out |= c.contains(points)
        return out


def stopping_cubes(b, sigma: AtomicMeasure, grid: ShiftedGrid, eta: float,
                   atoms: GridAtoms | None = None) -> StoppingFamily:
    """Maximal cubes R with sigma(R) > 0 and |<b>_R| < eta, found top-down."""
    bv = as_values(b, sigma).astype(complex)
    atoms = atoms or GridAtoms(grid, sigma.points)
    s = sigma.weights
    out = []
    stack = [k for k in atoms.occupied(0)]
    while stack:
        key = stack.pop()
        ids = atoms.atoms(key)
        mass = s[ids].sum()
        if mass <= 0:
            continue
        if abs(np.sum(bv[ids] * s[ids]) / mass) < eta:
            out.append(cube_of(grid, key))
        else:
            stack.extend(atoms.children(key))
    out.sort()
    return StoppingFamily(out, eta)


@dataclass
class ExceptionalSet:
    """H = H1 (closed balls) + H2 (standard dyadic cubes) + U (closed cubes)."""

    h1_centers: np.ndarray
    h1_radii: np.ndarray
    f1: list[Cube]
    f2: list[Cube]
    U: list[Cube]
    constants: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, dim: int) -> "ExceptionalSet":
        return cls(np.zeros((0, dim)), np.zeros(0), [], [], [])

    def boxes(self):
        lo, hi, kinds = [], [], []
        for c, r in zip(self.h1_centers, self.h1_radii):
            lo.append(c - r)
            hi.append(c + r)
            kinds.append("closed")
        for q in self.f1 + self.f2:
            lo.append(q.lo)
            hi.append(q.hi)
            kinds.append("halfopen")
        for q in self.U:
            lo.append(q.lo)
            hi.append(q.hi)
            kinds.append("closed")
        dim = self.h1_centers.shape[1]
        return (np.asarray(lo, dtype=float).reshape(-1, dim), np.asarray(hi, dtype=float).reshape(-1, dim),
                np.asarray(kinds, dtype=object))

    def contains_points(self, points) -> np.ndarray:
        lo, hi, kinds = self.boxes()
        return in_boxes(as_points(points, self.h1_centers.shape[1]), lo, hi, kinds)


@dataclass
class TransitForest:
    grid: ShiftedGrid
    atoms: GridAtoms
    keys: set[Key]

    @property
    def root(self) -> Key:
        return (0, (0,) * self.grid.dim)

    def __contains__(self, key: Key) -> bool:
        return key in self.keys

    def __len__(self) -> int:
        return len(self.keys)

    def parent_closed(self) -> bool:
        return all(k[0] == 0 or (k[0] - 1, tuple(i >> 1 for i in k[1])) in self.keys for k in self.keys)


def transit_cubes(grid: ShiftedGrid, sigma: AtomicMeasure, H: ExceptionalSet | None = None,
                  T: StoppingFamily | None = None, atoms: GridAtoms | None = None) -> TransitForest:
    """Cubes with positive mass not contained in H union T."""
    atoms = atoms or GridAtoms(grid, sigma.points)
    if not atoms.leaf_resolved():
        raise ValueError("grid depth insufficient: a leaf cube holds more than one atom")
    t_keys = T.keys if T is not None else set()
    blo = np.zeros((0, grid.dim))
    bhi = np.zeros((0, grid.dim))
    kinds = np.zeros(0, dtype=object)
    if H is not None:
        blo, bhi, kinds = H.boxes()
    if T is not None and T.cubes:
        blo = np.concatenate([blo, [c.lo for c in T.cubes]])
        bhi = np.concatenate([bhi, [c.hi for c in T.cubes]])
        kinds = np.concatenate([kinds, np.array(["halfopen"] * len(T.cubes), dtype=object)])

    def in_T(key: Key) -> bool:
        level, idx = key
        return any((level - k, tuple(i >> k for i in idx)) in t_keys for k in range(level + 1))

    keys: set[Key] = set()
    s = sigma.weights
    stack = atoms.occupied(0)
    while stack:
        key = stack.pop()
        if s[atoms.atoms(key)].sum() <= 0:
            continue
        if in_T(key):
            continue
        c = cube_of(grid, key)
        if len(blo) and box_covered(c.lo, c.hi, blo, bhi, kinds, query="halfopen"):
            continue
        keys.add(key)
        stack.extend(atoms.children(key))
    return TransitForest(grid, atoms, keys)


def martingale_difference(f, b, sigma: AtomicMeasure, key: Key, forest: TransitForest) -> np.ndarray:
    """Adapted difference at the transit cube ``key``, plus the root expectation at the root."""
    if key not in forest:
        raise ValueError(f"cube {key} is not a transit cube")
    fv = as_values(f, sigma).astype(complex)
    bv = as_values(b, sigma).astype(complex)
    s = sigma.weights
    ids = forest.atoms.atoms(key)
    try:
        aP = _avg_ratio(fv, bv, s, ids)
    except ZeroDivisionError:
        raise ValueError(f"<b> vanishes on transit cube {key}") from None
    out = np.zeros(len(sigma), dtype=complex)
    kids = forest.atoms.children(key)
    if not kids:
        out[ids] = fv[ids] - aP * bv[ids]
    for ck in kids:
        cid = forest.atoms.atoms(ck)
        if ck in forest:
            try:
                ac = _avg_ratio(fv, bv, s, cid)
            except ZeroDivisionError:
                raise ValueError(f"<b> vanishes on transit cube {ck}") from None
            out[cid] = (ac - aP) * bv[cid]
        else:
            out[cid] = fv[cid] - aP * bv[cid]
    if key == forest.root:
        out[ids] += aP * bv[ids]
    return out


@dataclass
class Expansion:
    terms: list[tuple[Key, np.ndarray]]
    reconstruction_error: float
    bessel_ratio: float
    norm: float


def l2(v, sigma: AtomicMeasure) -> float:
    return float(np.sqrt(np.sum(np.abs(v) ** 2 * sigma.weights)))


def expand(f, b, sigma: AtomicMeasure, forest: TransitForest) -> Expansion:
    """All adapted differences, the relative reconstruction error and the Bessel ratio.

    Ratios <f>/<b> are computed once per transit cube; ``martingale_difference``
    is the per-cube reference used to cross-check this routine.
    """
    fv = as_values(f, sigma).astype(complex)
    bv = as_values(b, sigma).astype(complex)
    s = sigma.weights
    fs, bs = fv * s, bv * s
    ratio: dict[Key, complex] = {}
    for key in forest.keys:
        ids = forest.atoms.atoms(key)
        den = bs[ids].sum()
        if den == 0:
            raise ValueError(f"<b> vanishes on transit cube {key}")
        ratio[key] = fs[ids].sum() / den
    total = np.zeros(len(sigma), dtype=complex)
    terms = []
    energy = 0.0
    for key in sorted(forest.keys):
        aP = ratio[key]
        ids = forest.atoms.atoms(key)
        d = np.zeros(len(sigma), dtype=complex)
        kids = forest.atoms.children(key)
        if not kids:
            d[ids] = fv[ids] - aP * bv[ids]
        for ck in kids:
            cid = forest.atoms.atoms(ck)
            if ck in forest.keys:
                d[cid] = (ratio[ck] - aP) * bv[cid]
            else:
                d[cid] = fv[cid] - aP * bv[cid]
        if key == forest.root:
            d[ids] += aP * bv[ids]
        terms.append((key, d))
        total[ids] += d[ids]
        energy += float(np.sum(np.abs(d[ids]) ** 2 * s[ids]))
    nf = l2(fv, sigma)
    err = l2(fv - total, sigma)
    return Expansion(terms, err / nf if nf > 0 else err, energy / nf**2 if nf > 0 else 0.0, nf)


def b_coefficients(f, b, sigma: AtomicMeasure, forest: TransitForest, leaf: Key, r: int) -> list[complex]:
    """B_{R^(k-1)} = <b^-1 Delta_{R^(k)} f>_{R^(k-1)} for k = r+1..level(R)."""
    fv = as_values(f, sigma).astype(complex)
    bv = as_values(b, sigma).astype(complex)
    s = sigma.weights
    level, idx = leaf
    out = []
    for k in range(r + 1, level + 1):
        upper = (level - k, tuple(i >> k for i in idx))
        lower = (level - k + 1, tuple(i >> (k - 1) for i in idx))
        d = martingale_difference(fv, bv, sigma, upper, forest)
        ids = forest.atoms.atoms(lower)
        out.append(complex(np.sum(d[ids] / bv[ids] * s[ids]) / s[ids].sum()))
    return out


def aqr(P: Cube, R: Cube, sigmaP: float, sigmaR: float, m: float, alpha: float) -> float:
    D = P.side + R.side + P.dist(R)
    return (P.side * R.side) ** (alpha / 2) * D ** -(m + alpha) * math.sqrt(sigmaP * sigmaR)


def aqr_matrix(cubes: Sequence[tuple[Cube, float]], m: float, alpha: float) -> np.ndarray:
    c = np.array([q.c for q, _ in cubes])
    s = np.array([q.side for q, _ in cubes])
    w = np.sqrt(np.array([mass for _, mass in cubes], dtype=float))
    half = s / 2
    gap = np.abs(c[:, None, :] - c[None, :, :]) - (half[:, None, None] + half[None, :, None])
    d = np.maximum(gap.max(axis=2), 0.0)
    D = s[:, None] + s[None, :] + d
    return np.outer(s, s) ** (alpha / 2) * D ** -(m + alpha) * np.outer(w, w)


@dataclass
class SchurResult:
    norm: float
    converged: bool
    iterations: int


def schur_norm(cubes: Sequence[tuple[Cube, float]], m: float, alpha: float,
               iterations: int = 2000, tol: float = 1e-12) -> SchurResult:
    """Operator norm of the symmetric nonnegative matrix [A_QR] by power iteration."""
    if not cubes:
        raise ValueError("need at least one cube")
    A = aqr_matrix(cubes, m, alpha)
    v = np.ones(len(A)) / math.sqrt(len(A))
    est = 0.0
    for it in range(1, iterations + 1):
        u = A @ v
        nu = float(np.linalg.norm(u))
        if nu == 0:
            return SchurResult(0.0, True, it)
        v = u / nu
        if abs(nu - est) <= tol * nu:
            return SchurResult(nu, True, it)
        est = nu
    return SchurResult(est, False, iterations)


def dyadic_tower(depth: int, dim: int = 1, mass=None) -> list[tuple[Cube, float]]:
    """All standard dyadic subcubes of [0,1)^dim down to side 2^-depth, with masses."""
    out = []
    for j in range(depth + 1):
        s = 2.0**-j
        grids = np.meshgrid(*([np.arange(2**j)] * dim), indexing="ij")
        for idx in np.stack([g.reshape(-1) for g in grids], axis=1):
            q = Cube(tuple((idx + 0.5) * s), s)
            out.append((q, s**dim if mass is None else mass(q)))
    return out


@dataclass
class CarlesonLedger:
    a: dict[Key, float]
    carleson_constant: float
    excluded: np.ndarray
    audit: dict
    embedding: float


def carleson_ledger(b, sigma: AtomicMeasure, grid: ShiftedGrid, Q: Cube, kernel: KernelSpec,
                    params: OperatorParams, xi0: float, r: int, gamma: float | None = None,
                    H: ExceptionalSet | None = None, T: StoppingFamily | None = None,
                    probes: Iterable[np.ndarray] | None = None,
                    atoms: GridAtoms | None = None, mu: AtomicMeasure | None = None) -> CarlesonLedger:
    """Whitney-region integrals of the cut-off square function, collected on good cubes."""
    gamma = gamma_auto(kernel.m, kernel.alpha) if gamma is None else gamma
    bv = as_values(b, sigma).astype(complex)
    t_lo = params.t_lo if params.t_lo > 0 else sigma.resolution
    params = params.with_(t_lo=t_lo)
    atoms = atoms or GridAtoms(grid, sigma.points)
    src_w = bv * sigma.weights
    mu = sigma if mu is None else mu

    gQ = gstar_field(ComplexMeasure(sigma.points, src_w), mu, kernel, params, sigma.points, upper=Q.side)
    gvals = np.array([g.value for g in gQ])
    S0 = gvals > xi0
    keep = ~S0

    hmask = np.zeros(len(sigma), dtype=bool)
    if H is not None:
        hmask |= H.contains_points(sigma.points)
    if T is not None:
        hmask |= T.contains_points(sigma.points)

    a: dict[Key, float] = defaultdict(float)
    s = sigma.weights
    j = -math.ceil(math.log2(Q.side))
    while True:
        side = 2.0**-j
        lo_t, hi_t = max(side / 2, t_lo), min(side, Q.side)
        if side <= t_lo:
            break
        if hi_t > lo_t:
            ts, h = log_grid(lo_t, hi_t, params.t_ratio)
            F = square_integrand(sigma.points, src_w, mu, kernel, params.lam, sigma.points, ts)
            I = simpson(F, h)
            wlevel = grid.N + 1 + j
            cells = np.floor(sigma.points / side).astype(np.int64)
            groups: dict[tuple, list[int]] = defaultdict(list)
            for aidx, row in enumerate(map(tuple, cells.tolist())):
                groups[row].append(aidx)
            for row, ids in sorted(groups.items()):
                ids = np.asarray(ids)
                if wlevel - r < 0 or wlevel > grid.max_depth:
                    continue
                if np.all(hmask[ids]):
                    continue
                R = Cube(tuple((np.asarray(row) + 0.5) * side), side)
                if not is_good(R, grid, r, gamma).good:
                    continue
                pkey = (wlevel - r, tuple(grid.indices(sigma.points[ids[:1]], wlevel - r)[0]))
                a[pkey] += float(np.sum(s[ids] * I[ids] * keep[ids]))
        j += 1

    # Carleson constant: sup over grid cubes S of sum_{P in S} a_P / sigma(S)
    sums: dict[Key, float] = defaultdict(float)
    for (level, idx), v in a.items():
        for k in range(level + 1):
            sums[(level - k, tuple(i >> k for i in idx))] += v
    ratios = {}
    for key, v in sums.items():
        mass = s[atoms.atoms(key)].sum()
        if mass > 0:
            ratios[key] = v / mass
    const = max(ratios.values(), default=0.0)

    direct = np.where(keep, gvals**2, 0.0) * s
    worst_gap, worst_bound = 0.0, 0.0
    for key, v in sums.items():
        ids = atoms.atoms(key)
        integ = direct[ids].sum()
        worst_gap = max(worst_gap, (v - integ) / max(integ, 1e-300) if v > 0 else 0.0)
        worst_bound = max(worst_bound, integ / (xi0**2 * s[ids].sum()))
    audit = {
        "a_nonnegative": all(v >= 0 for v in a.values()),
        "ledger_vs_integral": worst_gap,
        "integral_vs_xi0": worst_bound,
        "pass": all(v >= 0 for v in a.values()) and worst_gap <= 1e-3 and worst_bound <= 1 + 1e-9,
    }

    if probes is None:
        probes = [np.ones(len(sigma))]
    emb = 0.0
    for fprobe in probes:
        fp = np.asarray(fprobe, dtype=complex)
        nf = np.sum(np.abs(fp) ** 2 * s)
        tot = 0.0
        for key, v in a.items():
            ids = atoms.atoms(key)
            avg = np.sum(fp[ids] * s[ids]) / s[ids].sum()
            tot += abs(avg) ** 2 * v
        emb = max(emb, tot / nf if nf > 0 else 0.0)
    return CarlesonLedger(dict(a), const, np.nonzero(S0)[0], audit, emb)


# Exceptional set ---------------------------------------------------------------

def _merged(nu: ComplexMeasure, mu: AtomicMeasure):
    """Per-location |nu| and mu masses."""
    acc: dict[tuple, list[float]] = {}
    for p, w in zip(map(tuple, nu.points.tolist()), np.abs(nu.weights)):
        acc.setdefault(p, [0.0, 0.0])[0] += w
    for p, w in zip(map(tuple, mu.points.tolist()), mu.weights):
        acc.setdefault(p, [0.0, 0.0])[1] += w
    vals = np.array([v[0] for v in acc.values()])
    costs = np.array([v[1] for v in acc.values()])
    return list(acc), vals, costs


def worst_small_set(nu: ComplexMeasure, mu: AtomicMeasure, Q: Cube, eps: float):
    """Greedy worst subset A of Q with mu(A) <= eps mu(Q) and a fractional upper bound on |nu|(A)."""
    locs, vals, costs = _merged(nu, mu)
    pts = np.asarray(locs, dtype=float).reshape(-1, mu.dim)
    inside = Q.contains(pts) if len(pts) else np.zeros(0, dtype=bool)
    vals, costs = vals[inside], costs[inside]
    budget = eps * mu.mass_in(Q)
    ratio = np.where(costs > 0, vals / np.where(costs > 0, costs, 1), np.inf)
    order = np.lexsort((-vals, -ratio))
    used, got, upper = 0.0, 0.0, 0.0
    frac_done = False
    for i in order:
        if used + costs[i] <= budget:
            used += costs[i]
            got += vals[i]
            if not frac_done:
                upper += vals[i]
        elif not frac_done:
            upper += vals[i] * (budget - used) / costs[i]
            frac_done = True
    if not frac_done:
        upper = got
    return got, upper


def validate_tb_assumptions(nu: ComplexMeasure, mu: AtomicMeasure, Q: Cube, B1: float, eps0: float) -> dict:
    tv = nu.total_variation
    muQ = mu.mass_in(Q)
    supp = bool(np.all(Q.contains(nu.points))) if len(nu) else True
    total = nu.restrict(Q.contains(nu.points)).total() if len(nu) else 0j
    worst, upper = worst_small_set(nu, mu, Q, eps0)
    cap = tv / (32 * B1)
    return {
        "support": {"pass": supp},
        "mass": {"pass": abs(total - muQ) <= 1e-12 * max(muQ, 1.0), "value": abs(total - muQ)},
        "variation": {"pass": tv <= B1 * muQ * (1 + 1e-12), "value": tv / muQ if muQ else math.inf},
        "small_sets": {"pass": upper <= cap * (1 + 1e-12), "greedy": worst, "upper": upper, "cap": cap},
    }


def density_bound(sigma: AtomicMeasure, m: float, p0: float):
    """p(x) over r >= resolution and r(x) = sup{r >= h: sigma(B(x, r)) > p0 r^m} at each atom."""
    h = sigma.resolution if sigma.resolution > 0 else 1.0
    d = linf_dist(sigma.points, sigma.points)
    p = np.zeros(len(sigma))
    rx = np.zeros(len(sigma))
    for i in range(len(sigma)):
        order = np.argsort(d[i], kind="stable")
        ds = d[i][order]
        cm = np.cumsum(sigma.weights[order])
        last = np.append(ds[1:] != ds[:-1], True)
        ds, cm = ds[last], cm[last]
        # the mass is constant on [ds[k], ds[k+1]); radii below h are not probed
        starts = np.maximum(ds, h)
        ends = np.append(ds[1:], np.inf)
        valid = ends > starts
        p[i] = float(np.max(cm[valid] / starts[valid] ** m)) if valid.any() else 0.0
        reach = (cm / p0) ** (1 / m)
        ok = valid & (reach > starts)
        rx[i] = float(np.max(np.minimum(reach[ok], ends[ok]))) if ok.any() else 0.0
    return p, rx


def _maximal_lattice_cubes(Q: Cube, depth: int, sig_pts, sig_w, mu_pts, mu_w, pred) -> list[Cube]:
    j0 = -math.floor(math.log2(Q.side))
    out = []
    lo = np.floor(Q.lo * 2.0**j0).astype(int)
    hi = np.ceil(Q.hi * 2.0**j0).astype(int)
    grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    stack = [(j0, tuple(int(v) for v in row)) for row in np.stack([g.reshape(-1) for g in grids], 1)]
    while stack:
        j, idx = stack.pop()
        side = 2.0**-j
        q = Cube(tuple((np.asarray(idx) + 0.5) * side), side)
        ins = q.contains(sig_pts, closed=False) if len(sig_pts) else np.zeros(0, bool)
        inm = q.contains(mu_pts, closed=False) if len(mu_pts) else np.zeros(0, bool)
        s, m_ = sig_w[ins].sum(), mu_w[inm].sum()
        if s == 0 and m_ == 0:
            continue
        if pred(s, m_):
            out.append(q)
        elif j < depth:
            base = np.asarray(idx) * 2
            offs = np.stack(np.meshgrid(*([[0, 1]] * len(idx)), indexing="ij"), -1).reshape(-1, len(idx))
            stack.extend((j + 1, tuple(int(v) for v in base + o)) for o in offs)
    out.sort(key=lambda c: (c.side, c.center))
    return out


def exceptional_set(nu: ComplexMeasure, mu: AtomicMeasure, Q: Cube, B1: float, eps0: float,
                    p0: float, U_Q: Sequence[Cube] = (), depth: int = 12, m: float | None = None,
                    check: bool = True) -> ExceptionalSet:
    """H1 from the density bound, H2 from the maximal mass-ratio cubes, plus U_Q."""
    m = float(mu.dim if m is None else m)
    rep = validate_tb_assumptions(nu, mu, Q, B1, eps0)
    if check:
        for name, v in rep.items():
            if not v["pass"]:
                raise ValueError(f"assumption '{name}' violated: {v}")
    sigma = nu.abs_measure()
    p, rx = density_bound(sigma, m, p0)
    hot = p > p0
    delta = 1.0 / (32 * B1)
    f1 = _maximal_lattice_cubes(Q, depth, sigma.points, sigma.weights, mu.points, mu.weights,
                                lambda s, mm: s > B1 / eps0 * mm)
    f2 = _maximal_lattice_cubes(Q, depth, sigma.points, sigma.weights, mu.points, mu.weights,
                                lambda s, mm: s < delta * mm)
    H = ExceptionalSet(sigma.points[hot].copy(), rx[hot].copy(), f1, f2, list(U_Q),
                       {"B1": B1, "eps0": eps0, "p0": p0, "delta": delta, "eta": 1 / (2 * B1), "m": m})
    H.report = {"assumptions": rep, "h1_atoms": int(hot.sum()), "f1": len(f1), "f2": len(f2)}
    return H


def exceptional_ratio(sigma: AtomicMeasure, H: ExceptionalSet, T: StoppingFamily, Q: Cube) -> float:
    bad = H.contains_points(sigma.points) | T.contains_points(sigma.points)
    return float(sigma.weights[bad].sum() / sigma.mass_in(Q))


def probe_balls_in_H(sigma: AtomicMeasure, H: ExceptionalSet, C0: float, m: float,
                     centers, radii) -> dict:
    """Check that every probe ball heavier than C0 r^m lies inside H."""
    lo, hi, kinds = H.boxes()
    heavy, covered = 0, 0
    for c in as_points(centers, sigma.dim):
        for r in radii:
            if sigma.resolution > 0 and r < sigma.resolution:
                continue
            mass = sigma.weights[np.max(np.abs(sigma.points - c), axis=1) <= r].sum()
            if mass > C0 * r**m:
                heavy += 1
                covered += box_covered(c - r, c + r, lo, hi, kinds, query="closed")
    return {"heavy": heavy, "covered": covered, "pass": heavy == covered}


# Big piece ----------------------------------------------------------------------

@dataclass
class BigPiece:
    mask: np.ndarray
    P: np.ndarray
    ratio: float
    tau: float
    bound: float
    rigorous_bound: float
    worst_exceptional: float

    @property
    def passed(self) -> bool:
        return self.ratio >= self.bound


def big_piece_gq(sigma: AtomicMeasure, b, Q: Cube, xi0: float, delta0: float, trials: int,
                 rng: np.random.Generator, *, H: ExceptionalSet | None = None,
                 eta: float | None = None, kernel: KernelSpec | None = None,
                 params: OperatorParams | None = None, S0=None, max_depth: int | None = None) -> BigPiece:
    """G_Q = {x : Prob_w(x outside H, T_w, S0) > tau} by Monte Carlo over shifts."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if not 0 < delta0 < 1:
        raise ValueError("delta0 must lie in (0, 1)")
    delta1 = (1 + delta0) / 2
    tau = (1 - delta1) / 2
    if tau >= 1:
        raise ValueError("tau >= 1 leaves nothing")
    bv = as_values(b, sigma).astype(complex)
    if S0 is None:
        if kernel is None or params is None:
            S0 = np.zeros(len(sigma), dtype=bool)
        else:
            gs = gstar_field(ComplexMeasure(sigma.points, bv * sigma.weights), sigma, kernel, params,
                             sigma.points, upper=Q.side)
            S0 = np.array([g.value > xi0 for g in gs])
    S0 = np.asarray(S0, dtype=bool)
    fixed = S0 | (H.contains_points(sigma.points) if H is not None else False)
    if max_depth is None:
        max_depth = _resolving_depth(sigma, Q)
    hits = np.zeros(len(sigma))
    worst = 0.0
    sQ = sigma.mass_in(Q)
    for _ in range(trials):
        grid = ShiftedGrid.random(Q, rng, max_depth)
        bad = fixed.copy()
        if eta is not None:
            bad |= stopping_cubes(bv, sigma, grid, eta).contains_points(sigma.points)
        hits += ~bad
        worst = max(worst, float(sigma.weights[bad].sum() / sQ))
    P = hits / trials
    mask = P > tau
    ratio = float(sigma.weights[mask].sum() / sQ)
    return BigPiece(mask, P, ratio, tau, (1 - tau) / (2 - tau), tau / (1 - tau), worst)


def _resolving_depth(sigma: AtomicMeasure, Q: Cube) -> int:
    from .dyadic import grid_exponent

    top = 2.0 ** (grid_exponent(Q.side) + 1)
    h = sigma.resolution if sigma.resolution > 0 else Q.side
    return max(1, math.ceil(math.log2(top / h)) + 1)


def resolving_depth(sigma: AtomicMeasure, Q: Cube) -> int:
    """Grid depth whose leaf side is below the atom resolution (at most one atom per leaf)."""
    return _resolving_depth(sigma, Q)


# Testing condition and good lambda ----------------------------------------------

def superlevel_sup(values: np.ndarray, weights: np.ndarray, s: float, zeta_grid=None) -> tuple[float, list]:
    """sup over zeta of zeta^s * weight{values > zeta}; exact when no grid is given."""
    fin = np.isfinite(values)
    if np.any(~fin & (weights > 0)):
        return math.inf, []
    values, weights = values[fin], weights[fin]
    if zeta_grid is None:
        order = np.argsort(-values)
        v = values[order]
        cum = np.cumsum(weights[order])
        last = np.append(v[1:] != v[:-1], True) if len(v) else np.zeros(0, bool)
        curve = list(zip(v[last].tolist(), (v[last] ** s * cum[last]).tolist()))
    else:
        curve = [(float(z), float(z**s * weights[values > z].sum())) for z in zeta_grid]
    return max((c for _, c in curve), default=0.0), curve


def testing_condition(nu_Q: ComplexMeasure, mu: AtomicMeasure, Q: Cube, U_Q: Sequence[Cube], s: float,
                      kernel: KernelSpec, params: OperatorParams, zeta_grid=None, B1: float = 1.0):
    tv = nu_Q.total_variation
    if tv == 0:
        return 0.0, []
    inU = np.zeros(len(nu_Q), dtype=bool)
    for u in U_Q:
        inU |= u.contains(nu_Q.points)
    if np.abs(nu_Q.weights[inU]).sum() > tv / (16 * B1) * (1 + 1e-12):
        raise ValueError("|nu_Q|(U_Q) exceeds ||nu_Q|| / (16 B1)")
    sel = Q.contains(mu.points)
    for u in U_Q:
        sel &= ~u.contains(mu.points)
    if not sel.any():
        return 0.0, []
    gs = gstar_field(nu_Q, mu, kernel, params, mu.points[sel], upper=Q.side)
    vals = np.array([g.value for g in gs])
    sup, curve = superlevel_sup(vals, mu.weights[sel], s, zeta_grid)
    return sup / tv, [(z, c / tv) for z, c in curve]


def good_lambda_harness(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, t0: float,
                        eps_grid: Sequence[float], delta_grid: Sequence[float], xi_grid=None,
                        theta: float = 1.0, rho0: float = 1.0) -> list[dict]:
    from .measure import maximal_function_field

    fv = as_values(f, mu)
    nu = ComplexMeasure.from_density(fv, mu)
    g = np.array([v.value for v in gstar_field(nu, mu, kernel, params.with_(t_lo=t0), mu.points)])
    M = maximal_function_field(fv, mu, mu.points)
    if xi_grid is None:
        pos = g[g > 0]
        xi_grid = np.geomspace(pos.min(), pos.max(), 16)[:-1] if len(pos) > 1 else []
    target = 1 - theta / (16 * rho0)
    rows = []
    for eps in eps_grid:
        for delta in delta_grid:
            worst, probed = None, 0
            for xi in xi_grid:
                den = mu.weights[g > xi].sum()
                if den <= 0:
                    continue
                probed += 1
                num = mu.weights[(g > (1 + eps) * xi) & (M <= delta * xi)].sum()
                frac = num / den
                worst = frac if worst is None else max(worst, frac)
            rows.append({
                "eps": float(eps), "delta": float(delta),
                "fraction": None if worst is None else float(worst),
                "target": target, "probed": probed,
                "ok": None if worst is None else bool(worst <= target),
            })
    return rows


# Seeded instances ---------------------------------------------------------------

@dataclass
class TbInstance:
    mu: AtomicMeasure
    nu: ComplexMeasure
    Q: Cube
    B1: float
    eps0: float

    @property
    def sigma(self) -> AtomicMeasure:
        return self.nu.abs_measure()

    @property
    def b(self) -> np.ndarray:
        return self.nu.phase()

    @property
    def eta(self) -> float:
        return 1 / (2 * self.B1)


def tb_instance(seed: int, K: int = 128, B1: float = 2.0, spikes: int = 2,
                spike_height: float = 6.0, hole: bool = True) -> TbInstance:
    """Uniform grid mu with nu = c b mu; b has bounded phase, a few spikes and a near-empty hole.

    c is the complex constant making nu(Q) = mu(Q); eps0 is chosen as large as
    the small-set condition allows.
    """
    rng = np.random.default_rng(seed)
    mu = AtomicMeasure.uniform_grid(K)
    Q = Cube.from_bounds([0.0], [1.0])
    amp = rng.uniform(0.5, 1.5, K)
    if hole:
        start = int(rng.integers(0, K - K // 16))
        amp[start:start + K // 16] = 0.005
    amp[rng.choice(K, spikes, replace=False)] = spike_height
    b = amp * np.exp(1j * rng.uniform(-0.5, 0.5, K))
    raw = b * mu.weights
    c = mu.mass / raw.sum()
    nu = ComplexMeasure(mu.points, raw * c)
    if nu.total_variation > B1 * mu.mass:
        raise ValueError("instance violates the variation bound; lower spike_height or raise B1")
    density = np.abs(nu.weights) / mu.weights
    eps0 = 0.95 * nu.total_variation / (32 * B1 * mu.mass * density.max())
    return TbInstance(mu, nu, Q, B1, eps0)
