"""Batch experiment runner: ``nhsquare <experiment> --config <path> [--out <dir>] [--seed <u64>]``.

Exit status is 0 when every audited property passes, 1 when an audit fails
(the failing property is named on stderr) and 2 for an invalid config.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import czdecomp, dyadic, glstar, io, rbmo, tbmart, whitney
from .kernels import kernel_by_name
from .measure import AtomicMeasure, ComplexMeasure, Cube, as_values

EXPERIMENTS = ("eval", "goodbad", "whitney", "cz", "weak11", "tb", "goodlambda", "rbmo", "bessel")
OUT_ENV = "NHSQUARE_OUT_DIR"
U64 = 2**64


class ConfigError(Exception):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


def _line_of(text: str, key: str | None) -> int:
    if key is None:
        return 1
    needle = f'"{key}"'
    for i, row in enumerate(text.splitlines(), 1):
        if needle in row:
            return i
    return 1


class Config:
    """Parsed config document with key-anchored error reporting."""

    def __init__(self, path: Path):
        self.path = path
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found", line=1)
        self.text = path.read_text()
        try:
            self.doc = json.loads(self.text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno) from None
        if not isinstance(self.doc, dict):
            raise ConfigError("config must be a JSON object", line=1)

    def get(self, key, default=None):
        return self.doc.get(key, default)

    def need(self, key):
        if key not in self.doc:
            raise ConfigError(f"missing required key {key!r}", key=None)
        return self.doc[key]

    def number(self, key, default=None, positive=False):
        v = self.doc.get(key, default)
        if v is None:
            raise ConfigError(f"missing required key {key!r}")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key!r} must be a number", key)
        if positive and not v > 0:
            raise ConfigError(f"{key!r} must be positive", key)
        return v

    def path_of(self, value, key) -> Path:
        p = Path(value)
        if not p.is_absolute():
            p = self.path.parent / p
        if not p.is_file():
            raise ConfigError(f"{key} file {str(value)!r} not found", key)
        return p


# Input builders -------------------------------------------------------------------

def _measure(cfg: Config, key: str, required=True):
    spec = cfg.get(key)
    if spec is None:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return None
    try:
        if isinstance(spec, str):
            return io.load_measure(cfg.path_of(spec, key))
        if isinstance(spec, dict) and "uniform_grid" in spec:
            g = spec["uniform_grid"]
            return AtomicMeasure.uniform_grid(int(g["K"]), int(g.get("dim", 1)),
                                              float(g.get("lo", 0.0)), float(g.get("hi", 1.0)))
        if isinstance(spec, dict):
            return io.measure_from_doc(spec)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError, IndexError) as e:
        raise ConfigError(f"bad measure {key!r}: {e}", key) from None
    raise ConfigError(f"{key!r} must be a file path or a measure document", key)


def _positive_measure(cfg, key) -> AtomicMeasure:
    m = _measure(cfg, key)
    if not isinstance(m, AtomicMeasure):
        raise ConfigError(f"{key!r} must have real nonnegative weights", key)
    return m


def _complex_measure(cfg, key, required=True) -> ComplexMeasure | None:
    m = _measure(cfg, key, required)
    if m is None or isinstance(m, ComplexMeasure):
        return m
    return ComplexMeasure(m.points, m.weights.astype(complex))


def _function(cfg: Config, key: str, mu: AtomicMeasure, rng: np.random.Generator, default=None):
    spec = cfg.get(key, default)
    if spec is None:
        raise ConfigError(f"missing required key {key!r}")
    try:
        if isinstance(spec, str):
            vals = io.load_values(cfg.path_of(spec, key))
        elif isinstance(spec, dict) and "random" in spec:
            kind = spec["random"]
            if kind == "sign":
                vals = rng.choice([-1.0, 1.0], len(mu))
            elif kind == "complex_normal":
                vals = rng.normal(size=len(mu)) + 1j * rng.normal(size=len(mu))
            elif kind == "phase":
                vals = np.exp(1j * rng.uniform(-float(spec.get("spread", 1.0)), float(spec.get("spread", 1.0)), len(mu)))
            else:
                raise ConfigError(f"unknown random function {kind!r}", key)
        elif isinstance(spec, dict):
            vals = io.values_from_doc(spec)
        elif isinstance(spec, (int, float)):
            vals = np.full(len(mu), float(spec))
        else:
            raise ConfigError(f"{key!r} must be a path, a values document or a constant", key)
        return as_values(vals, mu)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad function {key!r}: {e}", key) from None


def _kernel(cfg: Config, dim: int):
    k = cfg.get("kernel", {"name": "model", "m": dim, "alpha": 1.0})
    try:
        return kernel_by_name(k.get("name", "model"), float(k.get("m", dim)), float(k.get("alpha", 1.0)), dim)
    except (ValueError, AttributeError) as e:
        raise ConfigError(str(e), "kernel") from None


def _params(cfg: Config) -> glstar.OperatorParams:
    p = cfg.get("params", {})
    try:
        return glstar.OperatorParams(**p)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad operator params: {e}", "params") from None


def _cube(cfg: Config, key: str, default=None) -> Cube:
    c = cfg.get(key, default)
    if c is None:
        raise ConfigError(f"missing required key {key!r}")
    try:
        if "lo" in c:
            return Cube.from_bounds(c["lo"], c["hi"])
        return Cube(tuple(c["center"]), float(c["side"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad cube {key!r}: {e}", key) from None


# Outputs ------------------------------------------------------------------------

def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


class Outputs:
    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, list[str]] = {}

    def csv(self, name: str, header: list[str], rows) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.files[name] = header

    def json(self, name: str, doc) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")
        self.files[name] = ["json"]


class Audit:
    def __init__(self):
        self.checks: dict[str, bool] = {}
        self.constants: dict = {}

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# Experiments --------------------------------------------------------------------

def run_eval(cfg, rng, out, audit):
    mu = _positive_measure(cfg, "mu")
    nu = _complex_measure(cfg, "nu", required=False)
    if nu is None:
        nu = ComplexMeasure.from_density(_function(cfg, "f", mu, rng, default=1.0), mu)
    kernel, params = _kernel(cfg, mu.dim), _params(cfg)
    xs = np.asarray(cfg.get("points", mu.points.tolist()), dtype=float).reshape(-1, mu.dim)
    if cfg.get("t0") is not None:
        params = params.with_(t_lo=cfg.number("t0", positive=True))
    gs = glstar.gstar_field(nu, mu, kernel, params, xs)
    cols = [f"x_{i + 1}" for i in range(mu.dim)] + ["value", "tail_bound", "quad_error", "diverged"]
    out.csv("eval.csv", cols, [list(x) + [g.value, g.tail_bound, g.quadrature_error, int(g.diverged)]
                               for x, g in zip(xs, gs)])
    audit.constants.update(max_value=max(g.value for g in gs), max_quad_error=max(g.quadrature_error for g in gs))
    audit.check("no_divergence", not any(g.diverged for g in gs))


def run_goodbad(cfg, rng, out, audit):
    I = _cube(cfg, "cube")
    seed_cube = _cube(cfg, "seed_cube", {"center": [0.0] * I.dim, "side": 1.0})
    rs = [int(r) for r in cfg.get("r_values", list(range(4, 11)))]
    gamma = cfg.number("gamma", 0.25, positive=True)
    trials = int(cfg.number("trials", 4000, positive=True))
    if trials < 100:
        raise ConfigError("'trials' must be at least 100", "trials")
    ests = [dyadic.bad_probability(I, seed_cube, r, gamma, trials, rng) for r in rs]
    out.csv("goodbad.csv", ["r", "estimate", "ci_low", "ci_high", "vacuous"],
            [[r, e.estimate, e.ci_low, e.ci_high, int(e.vacuous)] for r, e in zip(rs, ests)])
    usable = [(r, e.estimate) for r, e in zip(rs, ests) if e.estimate > 0]
    slope = float(np.polyfit([u[0] for u in usable], np.log([u[1] for u in usable]), 1)[0]) if len(usable) > 1 else math.nan
    audit.constants.update(slope=slope)
    audit.check("decay_slope", slope < 0)
    audit.check("ci_separation", ests[-1].ci_high < ests[0].ci_low)


def run_whitney(cfg, rng, out, audit):
    try:
        region = whitney.region_from_config(cfg.need("region"))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad region: {e}", "region") from None
    depth = int(cfg.number("depth", 7, positive=True))
    fam = whitney.whitney_decompose(region, depth)
    rep = whitney.validate_whitney(region, fam, cfg.number("rho_bound", whitney.RHO),
                                   cfg.get("rho0_bound"))
    out.json("whitney.json", fam.to_json() | {"report": rep})
    out.csv("whitney.csv", ["level"] + [f"index_{i + 1}" for i in range(region.dim)] + ["side"],
            [[l, *i, 2.0**-l] for l, i in fam.keys])
    audit.constants.update(rho=rep["p2_rho"]["value"], rho0=rep["p3_overlap"]["value"], count=rep["count"])
    for k in ("p1_inside", "p2_rho", "p3_overlap"):
        audit.check(k, rep[k]["pass"])
    mu = _measure(cfg, "mu", required=False)
    if mu is not None:
        sub = whitney.select_doubling_subfamily(mu, fam, region)
        target = sub.target
        audit.constants.update(subfamily_coverage=sub.coverage, subfamily_target=target)
        audit.check("subfamily_coverage", sub.passed)


def run_cz(cfg, rng, out, audit):
    mu = _positive_measure(cfg, "mu")
    nu = _complex_measure(cfg, "nu", required=False)
    if nu is None:
        nu = ComplexMeasure.from_density(_function(cfg, "f", mu, rng), mu)
    thr = czdecomp.cz_threshold(nu, mu)
    xi = cfg.get("xi")
    xi = float(xi) if xi is not None else cfg.number("xi_factor", 2.0, positive=True) * thr
    try:
        res = czdecomp.cz_decompose(nu, mu, xi)
    except ValueError as e:
        raise ConfigError(str(e), "xi" if "xi" in cfg.doc else "xi_factor") from None
    rep = czdecomp.validate_cz(res, nu, mu)
    res.report = rep
    out.json("cz.json", res.to_json())
    out.csv("cz.csv", [f"c_{i + 1}" for i in range(mu.dim)] + ["side", "phi_re", "phi_im"],
            [list(q.center) + [q.side, complex(p).real, complex(p).imag] for q, p in zip(res.cubes, res.phi)])
    audit.constants.update(xi=xi, threshold=thr, cubes=len(res.cubes), overlap=rep["overlap"])
    for k, v in rep["properties"].items():
        audit.check(k, v["pass"])
    audit.check("beta", rep["beta_ok"])


def run_weak11(cfg, rng, out, audit):
    mu = _positive_measure(cfg, "mu")
    nu = _complex_measure(cfg, "nu", required=False)
    if nu is None:
        nu = ComplexMeasure.from_density(_function(cfg, "f", mu, rng), mu)
    params = _params(cfg)
    if cfg.get("t0") is not None:
        params = params.with_(t_lo=cfg.number("t0", positive=True))
    res = czdecomp.weak11_harness(nu, mu, _kernel(cfg, mu.dim), params, cfg.get("xi_grid"))
    out.csv("weak11.csv", ["xi", "quotient"], res.curve)
    audit.constants.update(sup=res.sup, excluded=res.excluded)
    audit.check("finite", math.isfinite(res.sup))


def _tb_inputs(cfg, rng):
    inst = cfg.get("instance")
    if inst is not None:
        try:
            I = tbmart.tb_instance(int(cfg.get("seed", 0)), **inst)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad instance: {e}", "instance") from None
        return I.mu, I.nu, I.Q, I.B1, I.eps0
    mu = _positive_measure(cfg, "mu")
    nu = _complex_measure(cfg, "nu")
    return mu, nu, _cube(cfg, "Q"), cfg.number("B1", positive=True), cfg.number("eps0", positive=True)


def run_tb(cfg, rng, out, audit):
    mu, nu, Q, B1, eps0 = _tb_inputs(cfg, rng)
    if cfg.get("B1") is not None:
        B1 = cfg.number("B1", positive=True)
    if cfg.get("eps0") is not None:
        eps0 = cfg.number("eps0", positive=True)
    eta = cfg.get("eta", "auto")
    eta = 1 / (2 * B1) if eta == "auto" else float(eta)
    p0 = cfg.number("p0", 4.0, positive=True)
    delta0 = cfg.number("delta0", 0.5, positive=True)
    trials = int(cfg.number("trials", 200, positive=True))
    s = cfg.number("s", 1.0, positive=True)
    try:
        H = tbmart.exceptional_set(nu, mu, Q, B1, eps0, p0)
    except ValueError as e:
        raise ConfigError(str(e), "eps0") from None
    sigma, b = nu.abs_measure(), nu.phase()
    kernel = _kernel(cfg, mu.dim)
    params = _params(cfg)
    if params.t_lo == 0:
        params = params.with_(t_lo=sigma.resolution)
    xi0 = cfg.get("xi0")
    C1, curve = tbmart.testing_condition(nu, mu, Q, [], s, kernel, params)
    if xi0 is None:
        xi0 = 1.01 * (2 * C1 / (1 - delta0)) ** (1 / s)
    grid = dyadic.ShiftedGrid.random(Q, rng, tbmart.resolving_depth(sigma, Q))
    T = tbmart.stopping_cubes(b, sigma, grid, eta)
    ratio = tbmart.exceptional_ratio(sigma, H, T, Q)
    bp = tbmart.big_piece_gq(sigma, b, Q, float(xi0), delta0, trials, rng, H=H, eta=eta,
                             kernel=kernel, params=params)
    out.csv("testing.csv", ["zeta", "value"], curve)
    out.csv("bigpiece.csv", [f"x_{i + 1}" for i in range(mu.dim)] + ["P", "in_G"],
            [list(x) + [p, int(g)] for x, p, g in zip(sigma.points, bp.P, bp.mask)])
    audit.constants.update(B1=B1, eps0=eps0, eta=eta, delta=1 / (32 * B1), p0=p0, xi0=xi0, C1=C1,
                           exceptional_ratio=ratio, exceptional_target=1 - eta / 2,
                           bigpiece_ratio=bp.ratio, bigpiece_bound=bp.bound, tau=bp.tau)
    audit.check("exceptional_set", ratio <= 1 - eta / 2)
    audit.check("big_piece", bp.passed)


def run_goodlambda(cfg, rng, out, audit):
    mu = _positive_measure(cfg, "mu")
    f = _function(cfg, "f", mu, rng)
    t0 = cfg.number("t0", mu.resolution or 1.0, positive=True)
    rows = tbmart.good_lambda_harness(
        f, mu, _kernel(cfg, mu.dim), _params(cfg), t0,
        cfg.get("eps_grid", [0.1, 0.5, 1.0, 2.0]), cfg.get("delta_grid", [0.01, 0.05, 0.1, 0.5]),
        cfg.get("xi_grid"), cfg.number("theta", 1.0), cfg.number("rho0", 1.0))
    out.csv("goodlambda.csv", ["eps", "delta", "fraction", "target", "probed", "ok"],
            [[r["eps"], r["delta"], "N/A" if r["fraction"] is None else r["fraction"], r["target"],
              r["probed"], "N/A" if r["ok"] is None else int(r["ok"])] for r in rows])
    best = min((r["fraction"] for r in rows if r["fraction"] is not None), default=None)
    audit.constants.update(best_fraction=best)
    audit.check("some_pair_below_target", any(r["ok"] for r in rows))


def run_rbmo(cfg, rng, out, audit):
    mu = _positive_measure(cfg, "mu")
    f = _function(cfg, "f", mu, rng, default={"random": "sign"})
    if np.max(np.abs(f)) > 1 + 1e-12:
        raise ConfigError("f must satisfy |f| <= 1", "f")
    kappa = cfg.number("kappa", 8.0, positive=True)
    kernel, params = _kernel(cfg, mu.dim), _params(cfg)
    rep = rbmo.rbmo_battery(f, mu, kernel, params, kappa, int(cfg.number("centers", 8, positive=True)), rng,
                            cfg.get("t0"))
    out.csv("rbmo.csv", ["ball_id", "radius", "osc_median", "osc_farfield", "pair_quotient_max"],
            [[r.ball_id, r.radius, r.osc_median, r.osc_farfield, r.pair_quotient_max] for r in rep.rows])
    audit.constants.update(sup_osc_farfield=rep.sup_osc_farfield, sup_osc_median=rep.sup_osc_median,
                           sup_pair=rep.sup_pair, chain_constant=rep.chain_constant, kappa=kappa)
    audit.check("finite", all(math.isfinite(v) for v in (rep.sup_osc_farfield, rep.sup_pair)))
    audit.check("chain_constants", rep.chain_constant <= 4 * kappa)


def run_bessel(cfg, rng, out, audit):
    sigma = _positive_measure(cfg, "mu")
    f = _function(cfg, "f", sigma, rng, default={"random": "complex_normal"})
    b = _function(cfg, "b", sigma, rng, default=1.0)
    Q = _cube(cfg, "Q", {"lo": [0.0] * sigma.dim, "hi": [1.0] * sigma.dim})
    grid = dyadic.ShiftedGrid.random(Q, rng, tbmart.resolving_depth(sigma, Q))
    try:
        forest = tbmart.transit_cubes(grid, sigma)
        exp = tbmart.expand(f, b, sigma, forest)
    except ValueError as e:
        raise ConfigError(str(e), "b") from None
    out.csv("bessel.csv", ["level"] + [f"index_{i + 1}" for i in range(sigma.dim)] + ["energy"],
            [[k[0], *k[1], tbmart.l2(d, sigma) ** 2] for k, d in exp.terms])
    bound = cfg.number("bessel_bound", 20.0, positive=True)
    audit.constants.update(reconstruction_error=exp.reconstruction_error, bessel_ratio=exp.bessel_ratio,
                           transit_cubes=len(forest))
    audit.check("reconstruction", exp.reconstruction_error <= 1e-10)
    audit.check("bessel_bound", exp.bessel_ratio <= bound)


RUNNERS: dict[str, Callable] = {
    "eval": run_eval, "goodbad": run_goodbad, "whitney": run_whitney, "cz": run_cz,
    "weak11": run_weak11, "tb": run_tb, "goodlambda": run_goodlambda, "rbmo": run_rbmo,
    "bessel": run_bessel,
}


def run(experiment: str, config_path, out_dir=None, seed: int | None = None) -> int:
    cfg_path = Path(config_path)
    try:
        cfg = Config(cfg_path)
        declared = cfg.get("experiment", experiment)
        if declared != experiment:
            raise ConfigError(f"config is for experiment {declared!r}, not {experiment!r}", "experiment")
        if seed is None:
            seed = cfg.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < U64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        out = Path(out_dir or os.environ.get(OUT_ENV) or cfg.get("out") or "nhsquare_out")
        if not out.is_absolute() and out_dir is None and OUT_ENV not in os.environ and cfg.get("out"):
            out = cfg_path.parent / out
        rng = np.random.default_rng(seed)
        outputs, audit = Outputs(out), Audit()
        RUNNERS[experiment](cfg, rng, outputs, audit)
    except ConfigError as e:
        line = e.line if e.line is not None else _line_of(getattr(locals().get("cfg"), "text", ""), e.key)
        print(f"{cfg_path}:{line}: {e}", file=sys.stderr)
        return 2
    manifest = {
        "experiment": experiment,
        "seed": seed,
        "constants": audit.constants,
        "pass": audit.passed,
        "paper_refs": sorted(audit.checks),
        "checks": audit.checks,
        "outputs": outputs.files,
    }
    outputs.json("manifest.json", manifest)
    if not audit.passed:
        failed = [k for k, v in audit.checks.items() if not v]
        print(f"FAIL: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="nhsquare", description="Square-function experiment runner")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON config document")
    ap.add_argument("--out", default=None, help=f"output directory (overrides ${OUT_ENV})")
    ap.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
    args = ap.parse_args(argv)
    return run(args.experiment, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
