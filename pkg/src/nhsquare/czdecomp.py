"""Calderon-Zygmund decomposition of a complex measure against a non-doubling measure.

Cube selection works with the exact side breakpoints of the excess function

    A_z(s) = |nu|(Q(z, s)) - c mu(Q(z, 2s)),   c = xi 2^-(n+1),

which is piecewise constant and right-continuous in the side s.  For every
nu-atom z the last interval on which A_z > 0 is located, and the side is
chosen inside it so that all sides beyond twice the choice are non-positive.
The validator re-derives the properties independently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dyadic import find_doubling_ancestor
from .measure import AtomicMeasure, ComplexMeasure, Cube, as_points

BETA_TOL = 1e-12


@dataclass
class CZResult:
    xi: float
    cubes: list[Cube]
    centers: list[int]
    density: dict[int, complex]
    R: list[Cube]
    phi: list[complex]
    weights: np.ndarray  # w_i at the nu-atoms, shape (n_cubes, n_nu_atoms)
    beta: list[ComplexMeasure]
    m: float
    report: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        consts = {k: v.get("value") for k, v in self.report.get("properties", {}).items()}
        return {
            "xi": self.xi,
            "cubes": [{"center": list(q.center), "side": q.side} for q in self.cubes],
            "constants": consts,
            "beta_norms": self.report.get("beta_ratios", []),
        }


def _sup_dist(z: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.max(np.abs(pts - z), axis=1)


def _excess_breakpoints(dnu: np.ndarray, anu: np.ndarray, dmu: np.ndarray, wmu: np.ndarray, c: float):
    """Breakpoint sides b_k and the excess value on [b_k, b_{k+1})."""
    bps = np.unique(np.concatenate([[0.0], 2 * dnu, dmu]))
    nu_mass = np.array([anu[2 * dnu <= b].sum() for b in bps])
    mu_mass = np.array([wmu[dmu <= b].sum() for b in bps])
    return bps, nu_mass - c * mu_mass


def _choose_side(z, nu: ComplexMeasure, mu: AtomicMeasure, c: float) -> float | None:
    anu = np.abs(nu.weights)
    bps, A = _excess_breakpoints(_sup_dist(z, nu.points), anu, _sup_dist(z, mu.points), mu.weights, c)
    pos = np.nonzero(A > 0)[0]
    if len(pos) == 0:
        return None
    k = int(pos[-1])
    if k == len(bps) - 1:
        raise ValueError("xi below threshold: excess stays positive at every scale")
    lo, hi = bps[k], bps[k + 1]
    floor = max(lo, hi / 2)
    if floor <= 0:
        floor = hi / 4
    # geometric midpoint keeps atoms off the boundaries of Q and 2Q
    return math.sqrt(floor * hi) if floor < hi else hi / 2


def _merge_atoms(points_a, weights_a, points_b, weights_b):
    """Sum two atomic (complex) measures, merging coincident atoms."""
    pts = np.concatenate([points_a, points_b], axis=0)
    w = np.concatenate([weights_a, weights_b]).astype(complex)
    if len(pts) == 0:
        return pts, w
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    out = np.zeros(len(uniq), dtype=complex)
    np.add.at(out, inv.reshape(-1), w)
    return uniq, out


def cz_threshold(nu: ComplexMeasure, mu: AtomicMeasure) -> float:
    return 2.0 ** (mu.dim + 1) * nu.total_variation / mu.mass


def cz_decompose(nu: ComplexMeasure, mu: AtomicMeasure, xi: float, m: float | None = None,
                 k_max: int = 64) -> CZResult:
    if mu.mass <= 0:
        raise ValueError("mu must have positive mass")
    n = mu.dim
    m = float(n if m is None else m)
    thr = cz_threshold(nu, mu)
    if not xi > thr:
        raise ValueError(f"xi={xi} must exceed 2^(n+1)||nu||/||mu|| = {thr}")
    c = xi * 2.0 ** -(n + 1)
    cands: list[tuple[float, int]] = []
    for i, z in enumerate(nu.points):
        if nu.weights[i] == 0:
            continue
        s = _choose_side(z, nu, mu, c)
        if s is not None:
            cands.append((s, i))
    # largest first; skip candidates whose center is already covered
    cands.sort(key=lambda t: (-t[0], t[1]))
    cubes: list[Cube] = []
    centers: list[int] = []
    for s, i in cands:
        z = nu.points[i]
        if any(q.contains(z)[0] for q in cubes):
            continue
        cubes.append(Cube(tuple(z), s))
        centers.append(i)

    W = np.array([q.contains(nu.points) for q in cubes], dtype=float).reshape(len(cubes), len(nu))
    cover = W.sum(axis=0)
    weights = np.divide(W, cover, out=np.zeros_like(W), where=cover > 0)

    # good density on the atoms left uncovered
    key = {tuple(p): j for j, p in enumerate(mu.points)}
    density: dict[int, complex] = {}
    for j in range(len(mu)):
        density[j] = 0j
    for i in np.nonzero(cover == 0)[0]:
        if nu.weights[i] == 0:
            continue
        j = key.get(tuple(nu.points[i]))
        if j is None or mu.weights[j] == 0:
            raise ValueError("nu not decomposable at scale: uncovered atom without mu-mass")
        density[j] += nu.weights[i] / mu.weights[j]
    in_cubes = np.zeros(len(mu), dtype=bool)
    for q in cubes:
        in_cubes |= q.contains(mu.points)
    density = {j: v for j, v in density.items() if not in_cubes[j]}

    R, phi, beta = [], [], []
    for q, wi in zip(cubes, weights):
        k = find_doubling_ancestor(mu, q, 6.0, 6.0 ** (m + 1), k_max)
        Ri = q.scaled(6.0**k)
        ci = complex(np.sum(wi * nu.weights)) / mu.mass_in(Ri)
        inside = Ri.contains(mu.points)
        pts, w = _merge_atoms(nu.points, wi * nu.weights, mu.points[inside], -ci * mu.weights[inside])
        R.append(Ri)
        phi.append(ci)
        beta.append(ComplexMeasure(pts, w))
    res = CZResult(xi, cubes, centers, density, R, phi, weights, beta, m)
    res.report = validate_cz(res, nu, mu)
    if not res.report["properties"]["cz2"]["pass"]:
        raise ValueError(f"(C-Z-2) violated; witness eta={res.report['properties']['cz2']['witness']}")
    return res


def _cz2_witness(q: Cube, nu: ComplexMeasure, mu: AtomicMeasure, c: float, ladder: float = 2 ** 0.25):
    """Worst eta > 2 for |nu|(eta Q) <= c mu(2 eta Q); breakpoints plus a ratio ladder."""
    dn = _sup_dist(q.c, nu.points)
    dm = _sup_dist(q.c, mu.points)
    an = np.abs(nu.weights)
    r = q.radius
    etas = set((dn[dn > 2 * r] / r).tolist())
    reach = max(float(dn.max(initial=0)), float(dm.max(initial=0))) / r + 4
    e = 2.0
    while e <= reach:
        etas.add(e)
        e *= ladder
    etas.add(2.0)
    worst, witness = -math.inf, None
    for eta in sorted(etas):
        lhs = an[dn <= eta * r].sum()
        rhs = c * mu.weights[dm <= 2 * eta * r].sum()
        gap = (lhs - rhs) / max(rhs, 1e-300) if lhs > 0 else -math.inf
        if gap > worst:
            worst, witness = gap, eta
    return worst, witness


def validate_cz(result: CZResult, nu: ComplexMeasure, mu: AtomicMeasure,
                cz5_bound: float = 1.0, cz6_bound: float = 1.0, overlap_bound: int | None = None) -> dict:
    """Independent audit of the six decomposition properties."""
    n = mu.dim
    xi = result.xi
    c = xi * 2.0 ** -(n + 1)
    an = np.abs(nu.weights)
    props: dict[str, dict] = {}

    # (1) every cube carries excess mass
    margins = []
    for q in result.cubes:
        num = an[q.contains(nu.points)].sum()
        den = c * mu.mass_in(q.scaled(2))
        margins.append(num / den if den > 0 else math.inf)
    props["cz1"] = {"pass": all(v > 1 for v in margins), "value": min(margins, default=math.inf)}

    # (2) no excess for eta > 2
    worst, witness = -math.inf, None
    for q in result.cubes:
        g, e = _cz2_witness(q, nu, mu, c)
        if g > worst:
            worst, witness = g, e
    props["cz2"] = {"pass": worst <= 1e-12, "value": worst, "witness": witness}

    # (3) nu = f mu off the cubes with |f| <= xi
    covered_nu = np.zeros(len(nu), dtype=bool)
    covered_mu = np.zeros(len(mu), dtype=bool)
    for q in result.cubes:
        covered_nu |= q.contains(nu.points)
        covered_mu |= q.contains(mu.points)
    mu_w = {tuple(p): w for p, w in zip(mu.points, mu.weights)}
    worst_f = 0.0
    ok3 = True
    acc: dict[tuple, complex] = {}
    for p, w in zip(nu.points[~covered_nu], nu.weights[~covered_nu]):
        acc[tuple(p)] = acc.get(tuple(p), 0j) + w
    for p, w in acc.items():
        mw = mu_w.get(p, 0.0)
        if w == 0:
            continue
        if mw == 0:
            ok3 = False
            continue
        worst_f = max(worst_f, abs(w) / mw)
    for j, v in result.density.items():
        worst_f = max(worst_f, abs(v))
    props["cz3"] = {"pass": ok3 and worst_f <= xi * (1 + 1e-12), "value": worst_f / xi}

    # (4) beta_i has zero total mass and R_i is doubling with l(R_i) > 4 l(Q_i)
    beta_ratios, totals, ok4 = [], [], True
    for q, Ri, b in zip(result.cubes, result.R, result.beta):
        qmass = an[q.contains(nu.points)].sum()
        totals.append(abs(b.total()) / qmass)
        beta_ratios.append(b.total_variation / qmass)
        if not (Ri.side > 4 * q.side and mu.mass_in(Ri.scaled(6)) <= 6.0 ** (result.m + 1) * mu.mass_in(Ri)):
            ok4 = False
    props["cz4"] = {"pass": ok4 and all(t <= BETA_TOL for t in totals), "value": max(totals, default=0.0)}

    # (5) sum_i |phi_i| <= C xi on mu-atoms
    tot = np.zeros(len(mu))
    for Ri, ci in zip(result.R, result.phi):
        tot += abs(ci) * Ri.contains(mu.points)
    c5 = float(tot.max(initial=0.0)) / xi
    props["cz5"] = {"pass": c5 <= cz5_bound, "value": c5, "bound": cz5_bound}

    # (6) mu(R_i) ||phi_i|| <= C |nu|(Q_i)
    r6 = [mu.mass_in(Ri) * abs(ci) / an[q.contains(nu.points)].sum()
          for q, Ri, ci in zip(result.cubes, result.R, result.phi)]
    c6 = max(r6, default=0.0)
    props["cz6"] = {"pass": c6 <= cz6_bound * (1 + 1e-12), "value": c6, "bound": cz6_bound}

    overlap = 0
    if result.cubes:
        cnt = np.zeros(len(nu), dtype=int)
        for q in result.cubes:
            cnt += q.contains(nu.points)
        overlap = int(cnt.max())
    return {
        "properties": props,
        "beta_ratios": beta_ratios,
        "beta_ok": all(r <= 2 * (1 + 1e-12) for r in beta_ratios),
        "overlap": overlap,
        "overlap_ok": overlap_bound is None or overlap <= overlap_bound,
        "pass": all(p["pass"] for p in props.values()),
    }


def weak_quotient(values: np.ndarray, weights: np.ndarray, total: float, xi_grid=None):
    """Curve xi * mu{g > xi} / total and its sup; exact sup over all xi when no grid is given."""
    if total == 0 or len(values) == 0:
        return [], 0.0
    if xi_grid is None:
        order = np.argsort(-values)
        v = values[order]
        cum = np.cumsum(weights[order])
        # sup of xi mu{g > xi} is approached as xi rises to each value from below
        last = np.append(v[1:] != v[:-1], True)
        curve = list(zip(v[last].tolist(), (v[last] * cum[last] / total).tolist()))
    else:
        curve = [(float(x), float(x * weights[values > x].sum() / total)) for x in xi_grid]
    return curve, max((q for _, q in curve), default=0.0)


@dataclass
class WeakResult:
    sup: float
    curve: list[tuple[float, float]]
    excluded: int
    values: np.ndarray


def weak11_harness(nu: ComplexMeasure, mu: AtomicMeasure, kernel, params, xi_grid=None) -> WeakResult:
    from .glstar import gstar_field

    if nu.total_variation == 0:
        return WeakResult(0.0, [], 0, np.zeros(len(mu)))
    gs = gstar_field(nu, mu, kernel, params, mu.points)
    vals = np.array([g.value for g in gs])
    bad = np.array([g.diverged for g in gs])
    curve, sup = weak_quotient(vals[~bad], mu.weights[~bad], nu.total_variation, xi_grid)
    return WeakResult(sup, curve, int(bad.sum()), vals)
