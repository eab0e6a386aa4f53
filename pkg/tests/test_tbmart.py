import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsquare.dyadic import ShiftedGrid
from nhsquare.glstar import OperatorParams
from nhsquare.kernels import model_kernel
from nhsquare.measure import AtomicMeasure, ComplexMeasure, Cube
from nhsquare.tbmart import (
    ExceptionalSet, GridAtoms, StoppingFamily, aqr, aqr_matrix, b_coefficients, big_piece_gq, carleson_ledger,
    cube_of, density_bound, dyadic_tower, exceptional_set, expand, good_lambda_harness, martingale_difference,
    probe_balls_in_H, resolving_depth, schur_norm, stopping_cubes, tb_instance, transit_cubes,
    validate_tb_assumptions, worst_small_set,
)
from nhsquare.tbmart import testing_condition as tc_sup

Q = Cube.from_bounds([0.0], [1.0])
K1 = model_kernel(1.0, 1.0)


def setup(K=16, seed=0, w=None):
    rng = np.random.default_rng(seed)
    sigma = AtomicMeasure(((np.arange(K) + rng.uniform(0.1, 0.9, K)) / K)[:, None], rng.uniform(0.5, 1.5, K) / K)
    depth = resolving_depth(sigma, Q)
    grid = ShiftedGrid(Q, (rng.uniform(-4, 4) if w is None else w,), depth)
    return sigma, grid


def accretive(n, rng, spread=1.0):
    return rng.uniform(0.5, 1.5, n) * np.exp(1j * rng.uniform(-spread, spread, n))


# stopping and transit cubes ---------------------------------------------------------

def test_stopping_constant_b_is_empty():
    sigma, grid = setup()
    assert stopping_cubes(1.0, sigma, grid, 0.5).cubes == []


def test_stopping_balanced_signs_stop_at_root():
    sigma = AtomicMeasure([[0.2], [0.7]], [1.0, 1.0])
    grid = ShiftedGrid(Q, (0.0,), 8)
    fam = stopping_cubes([1.0, -1.0], sigma, grid, 0.5)
    assert fam.keys == {grid.root.key}


def test_transit_full_and_empty():
    sigma, grid = setup()
    atoms = GridAtoms(grid, sigma.points)
    forest = transit_cubes(grid, sigma, atoms=atoms)
    every = {k for level in range(grid.max_depth + 1) for k in atoms.occupied(level)}
    assert forest.keys == every and forest.parent_closed()
    T = StoppingFamily([grid.root], 0.5)
    assert len(transit_cubes(grid, sigma, T=T, atoms=atoms)) == 0


def test_transit_needs_resolving_depth():
    sigma, _ = setup()
    with pytest.raises(ValueError):
        transit_cubes(ShiftedGrid(Q, (0.0,), 3), sigma)


# martingale differences -----------------------------------------------------------

def split_cube(forest, i, j):
    """Smallest transit cube holding atoms i and j."""
    best = None
    for key in forest.keys:
        ids = set(forest.atoms.atoms(key).tolist())
        if i in ids and j in ids and (best is None or key[0] > best[0]):
            best = key
    return best


def test_haar_two_atoms():
    sigma = AtomicMeasure([[0.25], [0.75]], [1.0, 1.0])
    grid = ShiftedGrid(Q, (0.0,), 8)
    forest = transit_cubes(grid, sigma)
    f = np.array([3.0, -1.0])
    m = f.mean()
    P = split_cube(forest, 0, 1)
    d = martingale_difference(f, 1.0, sigma, P, forest)
    # the root term also carries the expectation m
    expect = m if P == forest.root else 0.0
    assert np.allclose(d - expect, f - m)
    if P != forest.root:
        assert np.allclose(martingale_difference(f, 1.0, sigma, forest.root, forest), m)
    for w in (0.0, 3.3, -2.1):
        forest = transit_cubes(ShiftedGrid(Q, (w,), 8), sigma)
        assert expand(f, 1.0, sigma, forest).reconstruction_error <= 1e-15


def test_complex_b_two_atoms_exact():
    sigma = AtomicMeasure([[0.25], [0.75]], [1.0, 1.0])
    grid = ShiftedGrid(Q, (0.0,), 8)
    forest = transit_cubes(grid, sigma)
    f = np.array([2.0 - 1j, 0.5j])
    ex = expand(f, np.array([1.0, 1j]), sigma, forest)
    assert ex.reconstruction_error <= 1e-14


def test_vanishing_b_average_raises():
    sigma = AtomicMeasure([[0.25], [0.75]], [1.0, 1.0])
    grid = ShiftedGrid(Q, (0.0,), 8)
    forest = transit_cubes(grid, sigma)
    with pytest.raises(ValueError, match="vanishes"):
        martingale_difference([1.0, 0.0], [1.0, -1.0], sigma, forest.root, forest)
    with pytest.raises(ValueError):
        martingale_difference([1.0, 0.0], 1.0, sigma, (3, (999,)), forest)


def test_expand_matches_reference_differences():
    rng = np.random.default_rng(1)
    sigma, grid = setup(32, 1)
    forest = transit_cubes(grid, sigma)
    b = accretive(32, rng)
    f = rng.normal(size=32) + 1j * rng.normal(size=32)
    ex = expand(f, b, sigma, forest)
    for key, d in ex.terms:
        ref = martingale_difference(f, b, sigma, key, forest)
        assert np.allclose(d, ref, atol=1e-13)
    assert ex.reconstruction_error <= 1e-12


def test_constant_b_parseval_and_f_equal_b():
    rng = np.random.default_rng(2)
    sigma, grid = setup(64, 2)
    forest = transit_cubes(grid, sigma)
    ex = expand(rng.normal(size=64), 1.0, sigma, forest)
    assert ex.bessel_ratio == pytest.approx(1.0, abs=1e-10)
    b = accretive(64, rng)
    ex = expand(b, b, sigma, forest)
    for key, d in ex.terms:
        if key != forest.root:
            assert np.allclose(d, 0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_vanishing_means_and_telescoping(seed):
    rng = np.random.default_rng(seed)
    sigma, grid = setup(16, seed)
    forest = transit_cubes(grid, sigma)
    b = accretive(16, rng, 0.7)
    f = rng.normal(size=16) + 1j * rng.normal(size=16)
    s = sigma.weights
    nf = math.sqrt(np.sum(np.abs(f) ** 2 * s))
    for key in forest.keys:
        kids = forest.atoms.children(key)
        if key == forest.root or not kids or not all(k in forest for k in kids):
            continue
        d = martingale_difference(f, b, sigma, key, forest)
        ids = forest.atoms.atoms(key)
        assert abs(np.sum(d[ids] * s[ids])) <= 1e-12 * nf * math.sqrt(s[ids].sum()) + 1e-15
    leaf = max(forest.keys)
    r = 2
    B = b_coefficients(f, b, sigma, forest, leaf, r)
    top = (leaf[0] - r, tuple(i >> r for i in leaf[1]))
    ids = forest.atoms.atoms(top)
    target = np.sum(f[ids] * s[ids]) / np.sum(b[ids] * s[ids])
    assert abs(sum(B) - target) <= 1e-10 * abs(target)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_stopping_maximal_and_forest_parent_closed(seed, eta):
    rng = np.random.default_rng(seed)
    sigma, grid = setup(16, seed)
    b = rng.uniform(0.05, 1.5, 16) * np.exp(1j * rng.uniform(-2.5, 2.5, 16))
    T = stopping_cubes(b, sigma, grid, eta)
    keys = T.keys
    for lvl, idx in keys:
        for k in range(1, lvl + 1):
            assert (lvl - k, tuple(i >> k for i in idx)) not in keys
    forest = transit_cubes(grid, sigma, T=T)
    assert forest.parent_closed()
    for key in forest.keys:
        assert not any(cube_of(grid, key).is_descendant_of(c) for c in T.cubes)


# the A_QR matrix ------------------------------------------------------------------

def test_aqr_examples():
    q = Cube((0.5,), 1.0)
    assert aqr(q, q, 1.0, 1.0, 1.0, 1.0) == pytest.approx(0.25)
    assert aqr(q, q, 0.0, 1.0, 1.0, 1.0) == 0.0
    far = [aqr(q, Cube((0.5 + d,), 1.0), 1, 1, 1.0, 1.0) for d in (1e6, 2e6)]
    assert far[1] / far[0] == pytest.approx(2.0**-2, rel=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 4), st.floats(-5, 5), st.floats(0.01, 4), st.floats(0, 3), st.floats(0, 3))
def test_aqr_symmetric(c1, s1, c2, s2, m1, m2):
    P, R = Cube((c1,), s1), Cube((c2,), s2)
    assert aqr(P, R, m1, m2, 1.0, 0.5) == aqr(R, P, m2, m1, 1.0, 0.5)


def test_schur_examples():
    q = (Cube((0.5,), 1.0), 1.0)
    assert schur_norm([q], 1.0, 1.0).norm == pytest.approx(0.25, abs=1e-15)
    cubes = dyadic_tower(5)
    res = schur_norm(cubes, 1.0, 1.0)
    A = aqr_matrix(cubes, 1.0, 1.0)
    assert res.converged
    assert res.norm == pytest.approx(np.linalg.eigvalsh(A).max(), rel=1e-8)
    assert schur_norm(dyadic_tower(4), 1.0, 1.0).norm <= res.norm
    for i in range(0, len(cubes), 7):
        for j in range(0, len(cubes), 5):
            (P, sp), (R, sr) = cubes[i], cubes[j]
            assert A[i, j] == pytest.approx(aqr(P, R, sp, sr, 1.0, 1.0), rel=1e-12)


# Carleson ledger --------------------------------------------------------------------

def test_carleson_ledger_inactive_cutoff():
    sigma = AtomicMeasure.uniform_grid(64, lo=0.0, hi=1.0)
    depth = resolving_depth(sigma, Q)
    grid = ShiftedGrid(Q, (0.3,), depth)
    params = OperatorParams(t_lo=1 / 64)
    led = carleson_ledger(1.0, sigma, grid, Q, K1, params, xi0=1e6, r=8)
    assert len(led.excluded) == 0
    assert led.audit["pass"] and led.audit["a_nonnegative"]
    assert all(v >= 0 for v in led.a.values())
    # f = 1: the embedding sum is sum a_P / sigma(Q), below the Carleson constant
    assert led.embedding == pytest.approx(sum(led.a.values()) / sigma.mass)
    assert led.embedding <= led.carleson_constant * (1 + 1e-12)


def test_carleson_ledger_cutoff_excludes():
    inst = tb_instance(0, K=64)
    sigma = inst.sigma
    grid = ShiftedGrid(Q, (0.3,), resolving_depth(sigma, Q))
    led = carleson_ledger(inst.b, sigma, grid, Q, K1, OperatorParams(), xi0=1.0, r=8, mu=inst.mu)
    assert len(led.excluded) > 0 and led.audit["pass"]


# exceptional set and assumptions ----------------------------------------------------

def test_small_set_greedy_vs_exhaustive():
    rng = np.random.default_rng(5)
    mu = AtomicMeasure(np.arange(10)[:, None] / 10, rng.uniform(0.05, 0.2, 10))
    nu = ComplexMeasure(mu.points, rng.uniform(0, 1, 10) * np.exp(1j * rng.uniform(0, 6, 10)))
    for eps in (0.1, 0.25, 0.5):
        greedy, upper = worst_small_set(nu, mu, Q, eps)
        budget = eps * mu.mass
        best = 0.0
        for k in range(11):
            for A in itertools.combinations(range(10), k):
                A = list(A)
                if mu.weights[A].sum() <= budget:
                    best = max(best, np.abs(nu.weights[A]).sum())
        assert greedy <= best + 1e-12 <= upper + 2e-12


def test_exceptional_set_slack_thresholds():
    mu = AtomicMeasure.uniform_grid(32)
    nu = ComplexMeasure.from_density(1.0, mu)
    U = [Cube.from_bounds([0.5], [0.55])]
    H = exceptional_set(nu, mu, Q, B1=2.0, eps0=0.01, p0=100.0, U_Q=U)
    assert len(H.h1_radii) == 0 and H.f1 == [] and H.f2 == []
    assert H.U == U


def test_planted_spike_enters_h1():
    mu = AtomicMeasure.uniform_grid(64)
    dens = np.ones(64)
    dens[20] = 20.0
    dens[40] = 0.0
    w = dens / dens.sum()
    nu = ComplexMeasure(mu.points, w.astype(complex))
    sigma = nu.abs_measure()
    p, _ = density_bound(sigma, 1.0, 4.0)
    # at r = h the ball around the spike holds its own mass plus two neighbours
    assert p[20] >= (w[19] + w[20] + w[21]) / (1 / 64) - 1e-12
    H = exceptional_set(nu, mu, Q, B1=2.0, eps0=1e-4, p0=4.0, check=False)
    assert H.contains_points(mu.points[20:21])[0]


def test_density_bound_brute_force():
    rng = np.random.default_rng(7)
    sigma = AtomicMeasure(np.sort(rng.uniform(0, 1, 12))[:, None], rng.uniform(0.01, 0.3, 12))
    h = sigma.resolution
    p, rx = density_bound(sigma, 1.0, 2.0)
    radii = np.concatenate([np.linspace(h, 2, 4000), np.abs(sigma.points[:, 0][:, None] - sigma.points[:, 0]).ravel()])
    radii = radii[radii >= h]
    for i, x in enumerate(sigma.points[:, 0]):
        mass = np.array([sigma.weights[np.abs(sigma.points[:, 0] - x) <= r].sum() for r in radii])
        assert p[i] == pytest.approx(np.max(mass / radii), rel=1e-9)
        heavy = radii[mass > 2.0 * radii]
        if len(heavy):
            assert rx[i] >= heavy.max() - 1e-12


def test_assumption_violation_named():
    mu = AtomicMeasure.uniform_grid(16)
    nu = ComplexMeasure.from_density(3.0, mu)
    with pytest.raises(ValueError, match="assumption 'mass'"):
        exceptional_set(nu, mu, Q, B1=4.0, eps0=0.01, p0=100.0)


@pytest.mark.parametrize("seed", [0, 1])
def test_tb_instance_assumptions_and_probe_balls(seed):
    inst = tb_instance(seed, K=64)
    rep = validate_tb_assumptions(inst.nu, inst.mu, inst.Q, inst.B1, inst.eps0)
    assert all(v["pass"] for v in rep.values())
    p0 = 4.0
    H = exceptional_set(inst.nu, inst.mu, inst.Q, inst.B1, inst.eps0, p0)
    sigma = inst.sigma
    res = probe_balls_in_H(sigma, H, 2.0 * p0, 1.0, sigma.points, [2.0**-k for k in range(1, 7)])
    assert res["pass"]


# big piece, testing condition, good lambda ------------------------------------------

def test_big_piece_all_clear():
    sigma = AtomicMeasure.uniform_grid(16)
    bp = big_piece_gq(sigma, 1.0, Q, 10.0, 0.5, 100, np.random.default_rng(0))
    assert np.all(bp.P == 1.0) and bp.mask.all() and bp.ratio == pytest.approx(1.0)
    with pytest.raises(ValueError):
        big_piece_gq(sigma, 1.0, Q, 10.0, 1.0, 100, np.random.default_rng(0))
    with pytest.raises(ValueError):
        big_piece_gq(sigma, 1.0, Q, 10.0, 0.5, 99, np.random.default_rng(0))


def test_testing_condition_basics():
    mu = AtomicMeasure.uniform_grid(32)
    params = OperatorParams(t_lo=1 / 32)
    zero = ComplexMeasure.from_density(0.0, mu)
    assert tc_sup(zero, mu, Q, [], 1.0, K1, params)[0] == 0.0
    nu = ComplexMeasure.from_density(1.0, mu)
    coarse, _ = tc_sup(nu, mu, Q, [], 1.0, K1, params, zeta_grid=np.geomspace(0.1, 10, 5))
    fine, _ = tc_sup(nu, mu, Q, [], 1.0, K1, params, zeta_grid=np.geomspace(0.1, 10, 9))
    exact, _ = tc_sup(nu, mu, Q, [], 1.0, K1, params)
    assert coarse <= fine <= exact + 1e-12
    with pytest.raises(ValueError):
        tc_sup(nu, mu, Q, [Cube.from_bounds([0.0], [0.5])], 1.0, K1, params)


def test_good_lambda_limits():
    mu = AtomicMeasure.uniform_grid(32)
    f = np.random.default_rng(0).choice([-1.0, 1.0], 32)
    rows = good_lambda_harness(f, mu, K1, OperatorParams(), 1 / 32, [0.1, 1e9], [1e-9, 0.5])
    byk = {(r["eps"], r["delta"]): r for r in rows}
    assert byk[(0.1, 1e-9)]["fraction"] == 0.0
    assert byk[(1e9, 0.5)]["fraction"] == 0.0
    assert all(r["target"] == 1 - 1 / 16 for r in rows)
