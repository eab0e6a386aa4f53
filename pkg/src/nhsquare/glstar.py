"""Numerical evaluation of the g*_lambda square function and its relatives.

The y-integrals are exact atom sums.  The t-integral is taken over a
geometric grid with Simpson's rule in log t; the reported quadrature error
is the gap to the plain trapezoid rule on the same grid, which bounds the
Simpson error with a wide margin for integrands that are smooth in log t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import KernelSpec
from .measure import AtomicMeasure, ComplexMeasure, Cube, as_points, as_values, linf_dist

TAIL_MODES = ("none", "analytic")


@dataclass(frozen=True)
class OperatorParams:
    lam: float = 4.0
    t_lo: float = 0.0
    t_hi: float | None = None
    t_ratio: float = 2.0 ** 0.125
    tail: str = "analytic"

    def __post_init__(self):
        if not self.lam > 2:
            raise ValueError(f"lambda must exceed 2, got {self.lam}")
        if self.t_lo < 0:
            raise ValueError("t_lo must be nonnegative")
        if self.t_hi is not None and not self.t_hi > self.t_lo:
            raise ValueError("fixed t_hi must exceed t_lo")
        if not self.t_ratio > 1:
            raise ValueError("t_ratio must exceed 1")
        if self.tail not in TAIL_MODES:
            raise ValueError(f"tail must be one of {TAIL_MODES}")

    def with_(self, **kw) -> "OperatorParams":
        d = dict(lam=self.lam, t_lo=self.t_lo, t_hi=self.t_hi, t_ratio=self.t_ratio, tail=self.tail)
        d.update(kw)
        return OperatorParams(**d)

    def alpha_bounds(self, kernel: KernelSpec) -> dict:
        """Both admissibility bounds on alpha and whether the kernel meets them."""
        full = kernel.m * (self.lam - 2)
        return {
            "alpha": kernel.alpha,
            "bound_theorem": full,
            "bound_lemma": full / 2,
            "theorem_ok": kernel.alpha <= full,
            "lemma_ok": kernel.alpha <= full / 2,
        }

    def require_lemma_pairing(self, kernel: KernelSpec) -> None:
        b = self.alpha_bounds(kernel)
        if not b["lemma_ok"]:
            raise ValueError(
                f"alpha={kernel.alpha} exceeds m(lambda-2)/2={b['bound_lemma']}"
            )


@dataclass(frozen=True)
class GValue:
    value: float
    quadrature_error: float
    tail_bound: float
    diverged: bool = False


def log_grid(a: float, b: float, ratio: float) -> tuple[np.ndarray, float]:
    """Geometric grid from a to b with an even number of steps of ratio <= ratio."""
    n = max(2, math.ceil(math.log(b / a) / math.log(ratio) - 1e-12))
    n += n % 2
    s = np.linspace(math.log(a), math.log(b), n + 1)
    return np.exp(s), (s[1] - s[0])


def simpson(F: np.ndarray, h: float) -> np.ndarray:
    w = np.ones(F.shape[0])
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return (h / 3) * np.tensordot(w, F, axes=(0, 0))


def trapezoid(F: np.ndarray, h: float) -> np.ndarray:
    w = np.ones(F.shape[0])
    w[0] = w[-1] = 0.5
    return h * np.tensordot(w, F, axes=(0, 0))


def base_scale(mu: AtomicMeasure) -> float:
    """Resolution scale, falling back to the diameter (or 1) for a lone atom."""
    h = mu.resolution
    if h > 0:
        return h
    return mu.diameter if mu.diameter > 0 else 1.0


def lower_limit(mu: AtomicMeasure, params: OperatorParams) -> float:
    return params.t_lo if params.t_lo > 0 else base_scale(mu) * 2.0**-6


def _diameter(*point_sets: np.ndarray) -> float:
    pts = np.concatenate([p for p in point_sets if len(p)], axis=0)
    if len(pts) < 2:
        return 0.0
    return float(np.max(pts.max(axis=0) - pts.min(axis=0)))


def upper_limit(params: OperatorParams, t_lo: float, *point_sets: np.ndarray) -> float:
    if params.t_hi is not None:
        return params.t_hi
    return max(8.0 * (_diameter(*point_sets) + t_lo), 4.0 * t_lo)


def square_integrand(src_pts: np.ndarray, src_w: np.ndarray, mu: AtomicMeasure,
                     kernel: KernelSpec, lam: float, xs: np.ndarray,
                     ts: np.ndarray) -> np.ndarray:
    """F[k, i] = sum_y (t/(t+|x_i-y|))^(m lam) |theta_t(y)|^2 mu_y / t^m at t = ts[k]."""
    m = kernel.m
    D = linf_dist(xs, mu.points)
    F = np.empty((len(ts), len(xs)))
    for k, t in enumerate(ts):
        th = kernel.matrix(t, mu.points, src_pts) @ src_w
        W = (t / (t + D)) ** (m * lam)
        F[k] = (W @ (np.abs(th) ** 2 * mu.weights)) / t**m
    return F


def low_end_slope(F: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Fitted slope of log(F/t) against log t on the three lowest grid points."""
    lt = np.log(ts[:3])
    out = np.full(F.shape[1], np.nan)
    head = F[:3]
    ok = np.all(head > 0, axis=0)
    if ok.any():
        ly = np.log(head[:, ok]) - lt[:, None]
        lc = lt - lt.mean()
        out[ok] = (lc @ (ly - ly.mean(axis=0))) / (lc @ lc)
    return out


def _integrate(F, ts, h, tail_sq, detect):
    S = np.maximum(simpson(F, h), 0.0)
    Tr = trapezoid(F, h)
    err = np.abs(S - Tr) / np.maximum(S, 1e-300)
    err[S == 0] = 0.0
    values = np.sqrt(S + tail_sq)
    diverged = np.zeros(len(S), dtype=bool)
    if detect:
        slope = low_end_slope(F, ts)
        diverged = np.nan_to_num(slope, nan=0.0) <= -1.0
        values = np.where(diverged, np.inf, values)
    tb = math.sqrt(tail_sq)
    return [GValue(float(v), float(e), tb, bool(d)) for v, e, d in zip(values, err, diverged)]


def _source(nu) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(nu, AtomicMeasure):
        return nu.points, nu.weights.astype(complex), nu.mass
    return nu.points, nu.weights, nu.total_variation


def gstar_field(nu, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, xs,
                upper: float | None = None) -> list[GValue]:
    """g* of nu at every row of xs; ``upper`` caps t (localized operator)."""
    xs = as_points(xs, mu.dim)
    src_pts, src_w, tv = _source(nu)
    if len(mu) == 0 or len(src_w) == 0 or tv == 0:
        return [GValue(0.0, 0.0, 0.0) for _ in xs]
    t_lo = lower_limit(mu, params)
    detect = params.t_lo == 0
    if upper is not None:
        if upper <= t_lo:
            return [GValue(0.0, 0.0, 0.0) for _ in xs]
        t_hi, tail_sq = upper, 0.0
    else:
        t_hi = upper_limit(params, t_lo, mu.points, src_pts, xs)
        tail_sq = 0.0
        if params.tail == "analytic":
            m = kernel.m
            # |theta_t| <= C ||nu|| t^-m and the cone sum is at most mass(mu)
            tail_sq = kernel.size_const**2 * tv**2 * mu.mass * t_hi ** (-3 * m) / (3 * m)
    ts, h = log_grid(t_lo, t_hi, params.t_ratio)
    F = square_integrand(src_pts, src_w, mu, kernel, params.lam, xs, ts)
    return _integrate(F, ts, h, tail_sq, detect)


def gstar(nu, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, x) -> GValue:
    return gstar_field(nu, mu, kernel, params, as_points(x, mu.dim))[0]


def gstar_localized(nu, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams,
                    Q: Cube, x) -> GValue:
    return gstar_field(nu, mu, kernel, params, as_points(x, mu.dim), upper=Q.side)[0]


def gstar_truncated(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, x,
                    t0: float | None = None) -> GValue:
    t0 = params.t_lo if t0 is None else t0
    if not t0 > 0:
        raise ValueError("truncation level t0 must be positive")
    nu = ComplexMeasure.from_density(f, mu)
    return gstar(nu, mu, kernel, params.with_(t_lo=t0), x)


def values(gs: Sequence[GValue]) -> np.ndarray:
    return np.array([g.value for g in gs])


def v_t(f, mu: AtomicMeasure, kernel: KernelSpec, x, t: float) -> float:
    """sum_z t^alpha/(t+|x-z|)^(m+alpha) |f(z)| mu_z."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.max(np.abs(mu.points - x), axis=1)
    a, m = kernel.alpha, kernel.m
    return float(np.sum(t**a / (t + d) ** (m + a) * np.abs(as_values(f, mu)) * mu.weights))


def u_t(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, x, t: float) -> float:
    if not t > 0:
        raise ValueError("t must be positive")
    w = as_values(f, mu) * mu.weights
    F = square_integrand(mu.points, w.astype(complex), mu, kernel, params.lam,
                         as_points(x, mu.dim), np.array([t]))
    return float(np.sqrt(F[0, 0]))


def t_compare(f, mu: AtomicMeasure, kernel: KernelSpec, params: OperatorParams, B: Cube,
              x, x_prime) -> float:
    """Quadrature of the cone-weight difference functional for f off 2B."""
    x = np.asarray(x, dtype=float).reshape(-1)
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    if not (B.contains(x)[0] and B.contains(xp)[0]):
        raise ValueError("both points must lie in B")
    g = as_values(f, mu) * ~B.scaled(2).contains(mu.points)
    w = (g * mu.weights).astype(complex)
    if not np.any(w) or np.array_equal(x, xp):
        return 0.0
    t_lo = lower_limit(mu, params)
    t_hi = upper_limit(params, t_lo, mu.points, np.stack([x, xp]))
    ts, h = log_grid(t_lo, t_hi, params.t_ratio)
    m, lam = kernel.m, params.lam
    dx = np.max(np.abs(mu.points - x), axis=1)
    dxp = np.max(np.abs(mu.points - xp), axis=1)
    F = np.empty((len(ts), 1))
    for k, t in enumerate(ts):
        th = kernel.matrix(t, mu.points, mu.points) @ w
        gap = (t / (t + dx)) ** (m * lam / 2) - (t / (t + dxp)) ** (m * lam / 2)
        F[k, 0] = np.sum(gap**2 * np.abs(th) ** 2 * mu.weights) / t**m
    return float(np.sqrt(max(simpson(F, h)[0], 0.0)))
