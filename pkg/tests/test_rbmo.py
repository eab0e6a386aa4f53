import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsquare.glstar import OperatorParams
from nhsquare.kernels import model_kernel
from nhsquare.measure import AtomicMeasure, Cube
from nhsquare.rbmo import (
    FarField, annulus_samples, chain_balls, far_field_constant, key_lemma_check, pair_denominator, rbmo_battery,
    rbmo_osc, rbmo_pair, validate_chain, weighted_median,
)

K1 = model_kernel(1.0, 1.0)
P = OperatorParams()


def test_weighted_median_brute():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.normal(size=9)
        w = rng.uniform(0.1, 1, 9)
        med = weighted_median(v, w)
        cost = lambda c: np.sum(np.abs(v - c) * w)
        assert cost(med) <= min(cost(c) for c in v) + 1e-12
    with pytest.raises(ValueError):
        weighted_median([], [])


def test_osc_constant_and_two_atom_example():
    mu = AtomicMeasure.uniform_grid(16)
    B = Cube((0.5,), 0.25)
    assert rbmo_osc(7.0, mu, B, 8.0) == 0.0
    two = AtomicMeasure([[0.0], [0.1], [3.0]], [1.0, 1.0, 2.0])
    B = Cube((0.05,), 0.2)
    big = two.mass_in(B.scaled(8.0))
    osc = rbmo_osc([0.0, 2.0, 5.0], two, B, 8.0)
    assert osc == pytest.approx(two.mass_in(B) / big * 1.0)
    with pytest.raises(ValueError):
        rbmo_osc(1.0, two, Cube((10.0,), 0.1), 8.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_osc_median_optimal_and_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    mu = AtomicMeasure(rng.uniform(0, 1, (12, 1)), rng.uniform(0.1, 1, 12))
    g = rng.normal(size=12)
    B = Cube((float(rng.uniform(0.2, 0.8)),), float(rng.uniform(0.2, 0.6)))
    if mu.mass_in(B) == 0:
        return
    best = rbmo_osc(g, mu, B, 4.0)
    for cand in np.linspace(g.min() - 1, g.max() + 1, 41):
        assert best <= rbmo_osc(g, mu, B, 4.0, float(cand)) + 1e-12
    assert rbmo_osc(g + c, mu, B, 4.0) == pytest.approx(best, abs=1e-12)


def test_pair_examples():
    mu = AtomicMeasure.uniform_grid(16)
    B = Cube((0.5,), 0.25)
    assert rbmo_pair(np.zeros(16), mu, B, B, 8.0, 3.0, 3.0) == 0.0
    lone = AtomicMeasure([[0.5]], [1.0])
    assert pair_denominator(lone, B, Cube((0.5,), 1.0), 8.0) == 1.0
    # one atom at distance 1/4 from the centre, weight 1/16
    sparse = AtomicMeasure([[0.5], [0.75]], [1.0, 1 / 16])
    assert pair_denominator(sparse, Cube((0.5,), 0.1), Cube((0.5,), 0.2), 8.0) == pytest.approx(1 + (1 / 16) / 0.25)
    with pytest.raises(ValueError):
        rbmo_pair(np.zeros(16), mu, Cube((0.5,), 1.0), B, 8.0, 0.0, 0.0)


def test_chain_examples():
    B = Cube((0.3,), 0.1)
    assert chain_balls(B, B, 8.0) == [B]
    for k in (1, 3, 5):
        Bp = Cube((0.3,), 0.1 * 2**k)
        ch = chain_balls(B, Bp, 8.0)
        assert len(ch) == k + 1
        radii = [c.radius for c in ch]
        assert all(b / a == pytest.approx(2.0) for a, b in zip(radii, radii[1:]))
    with pytest.raises(ValueError):
        chain_balls(Cube((0.0,), 1.0), B, 8.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7), st.sampled_from([4.0, 8.0, 16.0]))
def test_chain_nested_with_bounded_constants(seed, k, kappa):
    rng = np.random.default_rng(seed)
    B = Cube((float(rng.uniform(-1, 1)),), float(10 ** rng.uniform(-2, 0)))
    side = B.side * 2.0**k * rng.uniform(1.0, 2.0)
    shift = (side - B.side) / 2 * rng.uniform(-1, 1)
    Bp = Cube((B.c[0] + shift,), side)
    ch = chain_balls(B, Bp, kappa)
    rep = validate_chain(ch, kappa, annulus_samples(ch, kappa, rng))
    assert rep.nested and rep.doubling <= 2 + 1e-12
    assert rep.annulus_constant <= 2 * kappa + 2
    assert rep.passed(4 * kappa)


def test_far_field_and_key_lemma_trivial_cases():
    mu = AtomicMeasure.uniform_grid(64)
    f = np.random.default_rng(1).choice([-1.0, 1.0], 64)
    params = P.with_(t_lo=1 / 64)
    B = Cube((0.5,), 1 / 32)
    res = key_lemma_check(f, mu, K1, params, [0.5], 1 / 64, probes=8)
    assert res.values.shape == (8,) and res.max_deviation >= 0
    assert np.array_equal(res.probes[0], [0.5])  # the centre is probe 0, deviation 0 there
    inside = np.where(B.scaled(8).contains(mu.points), f, 0.0)
    assert key_lemma_check(inside, mu, K1, params, [0.5], 1 / 64).max_deviation == 0.0
    assert far_field_constant(inside, mu, K1, params, B, 8.0) == 0.0
    with pytest.raises(ValueError):
        key_lemma_check(2 * f, mu, K1, params, [0.5], 1 / 64)
    ff = FarField(f, K1, params)
    assert rbmo_osc(np.zeros(64), mu, B, 8.0, ff) >= 0


def test_battery_small():
    mu = AtomicMeasure.uniform_grid(32)
    f = np.random.default_rng(2).choice([-1.0, 1.0], 32)
    rep = rbmo_battery(f, mu, K1, P, centers=4, rng=np.random.default_rng(0))
    assert rep.rows and all(math.isfinite(r.osc_farfield) for r in rep.rows)
    assert rep.sup_osc_median <= rep.sup_osc_farfield + 1e-12
    assert rep.chain_constant <= 4 * rep.kappa
