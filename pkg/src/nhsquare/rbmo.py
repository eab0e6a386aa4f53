"""Regular BMO functionals, ball chains and far-field stability checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .glstar import OperatorParams, gstar, gstar_field
from .kernels import KernelSpec
from .measure import AtomicMeasure, ComplexMeasure, Cube, as_points, as_values, linf_dist


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Lower weighted median: least v with weight{values <= v} >= half the total."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(values) == 0 or weights.sum() <= 0:
        raise ValueError("median of an empty distribution")
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    k = int(np.searchsorted(cum, cum[-1] / 2, side="left"))
    return float(values[order][k])


@dataclass(frozen=True)
class FarField:
    """Center choice G_B = g*(f 1_{outside kappa B})(x_B)."""

    f: np.ndarray
    kernel: KernelSpec
    params: OperatorParams


def far_field_constant(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams,
                       B: Cube, kappa: float) -> float:
    fv = as_values(f, mu)
    outside = ~B.scaled(kappa).contains(mu.points)
    nu = ComplexMeasure(mu.points[outside], (fv * mu.weights)[outside])
    if len(nu) == 0:
        return 0.0
    g = gstar(nu, mu, kernel, params, B.c)
    return g.value


def _center_value(g: np.ndarray, mu: AtomicMeasure, B: Cube, kappa: float, center_choice) -> float:
    inside = B.contains(mu.points)
    if isinstance(center_choice, FarField):
        return far_field_constant(center_choice.f, mu, center_choice.kernel, center_choice.params, B, kappa)
    if center_choice == "median":
        if not inside.any():
            return 0.0
        return weighted_median(g[inside], mu.weights[inside])
    return float(center_choice)


def rbmo_osc(g, mu: AtomicMeasure, B: Cube, kappa: float, center_choice="median") -> float:
    """mu(kappa B)^-1 int_B |g - f_B| dmu for the chosen constant f_B."""
    gv = np.asarray(as_values(g, mu), dtype=float)
    big = mu.mass_in(B.scaled(kappa))
    if big <= 0:
        raise ValueError("mu(kappa B) = 0")
    fB = _center_value(gv, mu, B, kappa, center_choice)
    inside = B.contains(mu.points)
    return float(np.sum(np.abs(gv[inside] - fB) * mu.weights[inside]) / big)


def pair_denominator(mu: AtomicMeasure, B: Cube, Bp: Cube, kappa: float, m: float | None = None) -> float:
    """1 + int_{kappa B' minus B} |x - c_B|^-m dmu, as an atom sum."""
    m = mu.dim if m is None else m
    sel = Bp.scaled(kappa).contains(mu.points) & ~B.contains(mu.points)
    d = np.max(np.abs(mu.points[sel] - B.c), axis=1)
    return 1.0 + float(np.sum(mu.weights[sel] / d**m))


def rbmo_pair(g, mu: AtomicMeasure, B: Cube, Bp: Cube, kappa: float, f_B: float, f_Bp: float,
              m: float | None = None) -> float:
    if not Bp.contains_cube(B):
        raise ValueError("B is not contained in B'")
    return abs(f_B - f_Bp) / pair_denominator(mu, B, Bp, kappa, m)


# Chains --------------------------------------------------------------------------

def chain_balls(B: Cube, Bp: Cube, kappa: float) -> list[Cube]:
    """Nested balls from B to B' with radii doubling until r(B').

    Centers slide from x_B to c_{B'} in proportion to the radius increase,
    which keeps every ball inside the next one.
    """
    if not Bp.contains_cube(B):
        raise ValueError("B is not contained in B'")
    r, rp = B.radius, Bp.radius
    if rp <= r:
        return [B]
    K = max(1, math.ceil(math.log2(rp / r) - 1e-12))
    out = []
    for j in range(K + 1):
        rj = min(r * 2.0**j, rp) if j < K else rp
        theta = (rj - r) / (rp - r)
        c = B.c + theta * (Bp.c - B.c)
        out.append(Cube(tuple(c), 2 * rj))
    out[0], out[-1] = B, Bp
    return out


@dataclass
class ChainReport:
    nested: bool
    doubling: float
    annulus_constant: float
    far_constant: float
    samples: int
    details: dict = field(default_factory=dict)

    def passed(self, bound: float) -> bool:
        return self.nested and self.doubling <= 2 + 1e-12 and max(self.annulus_constant, self.far_constant) <= bound


def validate_chain(chain: Sequence[Cube], kappa: float, samples, x_B=None) -> ChainReport:
    """Measured constants for the radius comparability and the far-point comparability.

    The annulus constant is the worst of |z - x_B|/r(B_j) and its reciprocal over
    sample points z in kappa B_{j+1} minus kappa B_j.  The far constant is the worst
    of |y - z|/|z - x_B| and its reciprocal over y in 3B_j (exact in the sup metric)
    and sample points z outside kappa B_j.
    """
    x_B = chain[0].c if x_B is None else np.asarray(x_B, dtype=float)
    z = as_points(samples, chain[0].dim)
    nested = all(chain[j + 1].contains_cube(chain[j]) for j in range(len(chain) - 1))
    doubling = max((chain[j + 1].radius / chain[j].radius for j in range(len(chain) - 1)), default=1.0)
    ann, far = 1.0, 1.0
    dz = np.max(np.abs(z - x_B), axis=1)
    for j, Bj in enumerate(chain):
        rj = Bj.radius
        outside = ~Bj.scaled(kappa).contains(z)
        if j + 1 < len(chain):
            sel = chain[j + 1].scaled(kappa).contains(z) & outside
            if sel.any():
                q = dz[sel] / rj
                ann = max(ann, float(q.max()), float((1 / q).max()))
        if outside.any():
            dc = np.max(np.abs(z[outside] - Bj.c), axis=1)
            hi = dc + 3 * rj
            lo = np.maximum(dc - 3 * rj, 0.0)
            ref = dz[outside]
            with np.errstate(divide="ignore"):
                far = max(far, float((hi / ref).max()), float((ref / lo).max()))
    return ChainReport(nested, doubling, ann, far, len(z))


def annulus_samples(chain: Sequence[Cube], kappa: float, rng: np.random.Generator,
                    per_ball: int = 64, reach: float = 4.0) -> np.ndarray:
    """Random points in each kappa B_j and in a wider box around the last ball."""
    pts = []
    dim = chain[0].dim
    for Bj in list(chain) + [chain[-1].scaled(reach)]:
        big = Bj.scaled(kappa)
        pts.append(rng.uniform(big.lo, big.hi, (per_ball, dim)))
    return np.concatenate(pts)


# Key lemma -----------------------------------------------------------------------

@dataclass
class KeyLemmaResult:
    max_deviation: float
    excluded: int
    values: np.ndarray
    probes: np.ndarray

    def passed(self, C: float) -> bool:
        return self.max_deviation <= C


def key_lemma_check(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, x0, r: float,
                    kappa: float = 8.0, probes: int = 16, rng: np.random.Generator | None = None,
                    tol: float = 1e-9) -> KeyLemmaResult:
    """max over probes x in B(x0, r) of |g*(f 1_{far})(x) - g*(f 1_{far})(x0)|."""
    fv = as_values(f, mu)
    if np.max(np.abs(fv)) > 1 + tol:
        raise ValueError("the function must satisfy |f| <= 1")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    rng = np.random.default_rng(0) if rng is None else rng
    B = Cube(tuple(x0), 2 * r)
    far = ~B.scaled(kappa).contains(mu.points)
    nu = ComplexMeasure(mu.points[far], (fv * mu.weights)[far])
    xs = np.concatenate([x0[None], rng.uniform(B.lo, B.hi, (max(probes - 1, 0), len(x0)))])
    if len(nu) == 0:
        return KeyLemmaResult(0.0, 0, np.zeros(len(xs)), xs)
    gs = gstar_field(nu, mu, kernel, params, xs)
    vals = np.array([g.value for g in gs])
    div = np.array([g.diverged for g in gs])
    if div[0]:
        raise ValueError("g* diverges at the center")
    dev = np.abs(vals[~div] - vals[0])
    return KeyLemmaResult(float(dev.max()), int(div.sum()), vals, xs)


# Battery -------------------------------------------------------------------------

@dataclass
class BallRow:
    ball_id: int
    center: tuple
    radius: float
    osc_median: float
    osc_farfield: float
    pair_quotient_max: float


@dataclass
class RBMOReport:
    rows: list[BallRow]
    sup_osc_farfield: float
    sup_osc_median: float
    sup_pair: float
    chain_constant: float
    kappa: float


def ball_battery(mu: AtomicMeasure, centers: int, rng: np.random.Generator, levels: int | None = None):
    """Balls at randomly chosen atoms with radii on a dyadic ladder from resolution to diameter."""
    h = mu.resolution if mu.resolution > 0 else 1.0
    top = max(mu.diameter, h)
    levels = levels or max(1, int(math.floor(math.log2(top / h))) + 1)
    # prefix of a seeded permutation: doubling the count keeps the earlier centers
    idx = rng.permutation(len(mu))[:centers]
    radii = [h * 2.0**k for k in range(levels)]
    return [(int(i), [Cube(tuple(mu.points[i]), 2 * r) for r in radii]) for i in sorted(idx)]


def rbmo_battery(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, kappa: float = 8.0,
                 centers: int = 8, rng: np.random.Generator | None = None, t0: float | None = None) -> RBMOReport:
    """Oscillation and pair quotients of g*_{t0}(f) with both center choices over a ball battery."""
    rng = np.random.default_rng(0) if rng is None else rng
    t0 = mu.resolution if t0 is None else t0
    p = params.with_(t_lo=t0)
    fv = as_values(f, mu)
    nu = ComplexMeasure.from_density(fv, mu)
    g = np.array([v.value for v in gstar_field(nu, mu, kernel, p, mu.points)])
    ff = FarField(fv, kernel, p)
    rows = []
    sup_pair = 0.0
    chain_const = 1.0
    bid = 0
    for i, balls in ball_battery(mu, centers, rng):
        consts = [far_field_constant(fv, mu, kernel, p, B, kappa) for B in balls]
        for k, B in enumerate(balls):
            osc_med = rbmo_osc(g, mu, B, kappa, "median")
            osc_ff = rbmo_osc(g, mu, B, kappa, consts[k])
            pq = 0.0
            for k2 in range(k + 1, len(balls)):
                pq = max(pq, rbmo_pair(g, mu, B, balls[k2], kappa, consts[k], consts[k2]))
            sup_pair = max(sup_pair, pq)
            rows.append(BallRow(bid, tuple(B.center), B.radius, osc_med, osc_ff, pq))
            bid += 1
        rep = validate_chain(chain_balls(balls[0], balls[-1], kappa), kappa, mu.points)
        chain_const = max(chain_const, rep.annulus_constant, rep.far_constant)
    return RBMOReport(
        rows,
        max(r.osc_farfield for r in rows),
        max(r.osc_median for r in rows),
        sup_pair,
        chain_const,
        kappa,
    )
