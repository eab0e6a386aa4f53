"""Standard kernels s_t(x, y), their numerical verification and theta_t."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .measure import AtomicMeasure, ComplexMeasure, as_points, as_values

Evaluator = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KernelSpec:
    """A kernel with declared growth order m, Holder exponent alpha and constants.

    The evaluator takes ``(t, x, y)`` with x and y broadcastable arrays whose
    last axis is the coordinate axis, and returns the kernel values.
    """

    name: str
    m: float
    alpha: float
    evaluator: Evaluator
    size_const: float = 1.0
    holder_const: float = 1.0

    def __call__(self, t: float, x, y) -> np.ndarray:
        return self.evaluator(t, np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def matrix(self, t: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Kernel matrix K[i, j] = s_t(xs[i], ys[j])."""
        return self(t, xs[:, None, :], ys[None, :, :])

    def scaled(self, c: float) -> "KernelSpec":
        ev = self.evaluator
        return KernelSpec(f"{c}*{self.name}", self.m, self.alpha,
                          lambda t, x, y: c * ev(t, x, y),
                          abs(c) * self.size_const, abs(c) * self.holder_const)


def model_kernel(m: float = 1.0, alpha: float = 1.0) -> KernelSpec:
    """t^alpha / (t + |x-y|)^(m+alpha) with l-infinity distance."""
    if m <= 0 or alpha <= 0:
        raise ValueError("m and alpha must be positive")

    def ev(t, x, y):
        d = np.max(np.abs(x - y), axis=-1)
        return t**alpha / (t + d) ** (m + alpha)

    # mean value bound on |y - y'| < t/2; only meaningful for alpha <= 1
    holder = (m + alpha) * 2.0 ** (m + 2 * alpha) if alpha <= 1 else math.inf
    return KernelSpec("model", float(m), float(alpha), ev, 1.0, holder)


def poisson_constant(n: int) -> float:
    return math.gamma((n + 1) / 2) / math.pi ** ((n + 1) / 2)


def poisson_kernel(n: int = 1) -> KernelSpec:
    """Classical Poisson kernel c_n t / (t^2 + |x-y|_2^2)^((n+1)/2); m = n, alpha = 1."""
    if n not in (1, 2):
        raise ValueError("Poisson kernel constants are declared for n in {1, 2}")
    c = poisson_constant(n)

    def ev(t, x, y):
        d2 = np.sum((x - y) ** 2, axis=-1)
        return c * t / (t * t + d2) ** ((n + 1) / 2)

    size = c * 2.0 ** ((n + 1) / 2)
    shrink = 1.0 - math.sqrt(n) / 2
    holder = c * (n + 1) * math.sqrt(n) * 2.0 ** ((n + 2) / 2) / shrink ** (n + 2)
    return KernelSpec("poisson", float(n), 1.0, ev, size, holder)


def kernel_by_name(name: str, m: float = 1.0, alpha: float = 1.0, dim: int = 1) -> KernelSpec:
    if name == "model":
        return model_kernel(m, alpha)
    if name == "poisson":
        return poisson_kernel(dim)
    raise ValueError(f"unknown kernel {name!r}; expected 'model' or 'poisson'")


def eval_kernel(spec: KernelSpec, t: float, x, y) -> complex:
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    return complex(spec(t, x, y))


class CheckResult(NamedTuple):
    value: float
    passed: bool
    rejected: int = 0


def _default_triples(rng: np.random.Generator, count: int, dim: int):
    t = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), count))
    x = rng.uniform(-10, 10, (count, dim))
    # distances on a log scale so both near and far regimes get sampled
    step = np.exp(rng.uniform(np.log(1e-4), np.log(1e4), count))[:, None]
    y = x + step * rng.uniform(-1, 1, (count, dim))
    return t, x, y


def verify_size(spec: KernelSpec, rng: np.random.Generator, count: int = 1000,
                sampler=None, dim: int = 1) -> CheckResult:
    """max |s_t(x,y)| (t+|x-y|)^(m+alpha) / t^alpha over samples."""
    if count < 1:
        raise ValueError("count must be at least 1")
    t, x, y = (sampler or _default_triples)(rng, count, dim)
    d = np.max(np.abs(x - y), axis=-1)
    vals = np.abs(np.array([spec(ti, xi, yi) for ti, xi, yi in zip(t, x, y)]))
    ratio = vals * (t + d) ** (spec.m + spec.alpha) / t**spec.alpha
    top = float(np.max(ratio))
    return CheckResult(top, top <= spec.size_const * (1 + 1e-9))


def _default_quads(rng: np.random.Generator, count: int, dim: int):
    t, x, y = _default_triples(rng, count, dim)
    frac = np.exp(rng.uniform(np.log(1e-6), np.log(0.499), count))[:, None]
    dirs = rng.uniform(-1, 1, (count, dim))
    dirs /= np.max(np.abs(dirs), axis=1, keepdims=True)
    yp = y + frac * t[:, None] * dirs
    return t, x, y, yp


def verify_holder(spec: KernelSpec, rng: np.random.Generator, count: int = 1000,
                  sampler=None, dim: int = 1) -> CheckResult:
    """max |s_t(x,y)-s_t(x,y')| (t+|x-y|)^(m+alpha) / |y-y'|^alpha over |y-y'| < t/2."""
    t, x, y, yp = (sampler or _default_quads)(rng, count, dim)
    step = np.max(np.abs(y - yp), axis=-1)
    keep = step < t / 2
    rejected = int(np.count_nonzero(~keep))
    top = 0.0
    for ti, xi, yi, ypi, si in zip(t[keep], x[keep], y[keep], yp[keep], step[keep]):
        if si == 0:
            continue
        diff = abs(spec(ti, xi, yi) - spec(ti, xi, ypi))
        d = np.max(np.abs(xi - yi))
        top = max(top, float(diff * (ti + d) ** (spec.m + spec.alpha) / si**spec.alpha))
    return CheckResult(top, top <= spec.holder_const * (1 + 1e-9), rejected)


def theta(spec: KernelSpec, nu, f, t: float, y) -> np.ndarray | complex:
    """sum_z s_t(y, z) f(z) nu_z at one point or at each row of y."""
    if not t > 0:
        raise ValueError("t must be positive")
    if isinstance(nu, AtomicMeasure):
        w = as_values(f, nu) * nu.weights
    else:
        w = nu.weights if f is None else np.asarray(f) * nu.weights
    pts = as_points(y, nu.dim)
    if len(nu) == 0:
        out = np.zeros(len(pts), dtype=complex)
    else:
        out = spec.matrix(t, pts, nu.points) @ w
    single = np.asarray(y).ndim <= 1 and len(pts) == 1
    return complex(out[0]) if single else out
