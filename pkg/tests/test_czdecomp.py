import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsquare.czdecomp import cz_decompose, cz_threshold, validate_cz, weak11_harness, weak_quotient
from nhsquare.glstar import OperatorParams
from nhsquare.kernels import model_kernel
from nhsquare.measure import AtomicMeasure, ComplexMeasure, Cube


def spiky(seed, K=64, spikes=3):
    rng = np.random.default_rng(seed)
    mu = AtomicMeasure.uniform_grid(K)
    w = (rng.normal(size=K) + 1j * rng.normal(size=K)) / K
    idx = rng.choice(K, spikes, replace=False)
    w[idx] += rng.uniform(0.5, 2.0, spikes) * np.exp(1j * rng.uniform(0, 6.28, spikes))
    return ComplexMeasure(mu.points, w), mu


def test_threshold_and_error():
    nu, mu = spiky(0)
    thr = cz_threshold(nu, mu)
    assert thr == pytest.approx(4 * nu.total_variation)
    with pytest.raises(ValueError):
        cz_decompose(nu, mu, thr)


def test_flat_measure_gives_no_cubes():
    mu = AtomicMeasure.uniform_grid(32)
    nu = ComplexMeasure.from_density(1.0, mu)
    xi = 5.0
    res = cz_decompose(nu, mu, xi)
    assert res.cubes == []
    assert all(v == pytest.approx(1.0) for v in res.density.values())
    # scan: no cube centred at an atom carries |nu|(Q) > xi/4 mu(2Q)
    for p in mu.points:
        for s in 2.0 ** np.arange(-7, 3):
            q = Cube(tuple(p), s)
            assert nu.variation_in(q) <= xi / 4 * mu.mass_in(q.scaled(2))


def test_single_spike():
    mu = AtomicMeasure.uniform_grid(64)
    nu = ComplexMeasure([[0.5]], [1.0 + 0j])
    res = cz_decompose(nu, mu, 8.0)
    assert len(res.cubes) == 1 and res.cubes[0].contains([[0.5]])[0]
    assert abs(res.beta[0].total()) <= 1e-12
    assert res.report["pass"]


@pytest.mark.parametrize("seed", range(5))
def test_validator_passes_and_invariants(seed):
    nu, mu = spiky(seed)
    res = cz_decompose(nu, mu, 2 * cz_threshold(nu, mu))
    rep = res.report
    assert rep["pass"], rep["properties"]
    assert all(abs(v) <= res.xi * (1 + 1e-12) for v in res.density.values())
    for b, q in zip(res.beta, res.cubes):
        assert abs(b.total()) <= 1e-12 * nu.variation_in(q)
    assert rep["beta_ok"]
    assert rep["overlap"] <= 2


def test_planted_phi_defect_fails_cz6():
    nu, mu = spiky(1)
    res = cz_decompose(nu, mu, 2 * cz_threshold(nu, mu))
    assert res.cubes
    bad = dataclasses.replace(res, phi=[10 * p for p in res.phi])
    rep = validate_cz(bad, nu, mu)
    assert not rep["properties"]["cz6"]["pass"]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.2, 5))
def test_homogeneity(seed, c):
    nu, mu = spiky(seed, K=32)
    xi = 2 * cz_threshold(nu, mu)
    a = cz_decompose(nu, mu, xi)
    b = cz_decompose(ComplexMeasure(nu.points, c * nu.weights), mu, c * xi)
    assert [q.center for q in a.cubes] == [q.center for q in b.cubes]
    assert [q.side for q in a.cubes] == pytest.approx([q.side for q in b.cubes])


def test_weak_quotient_exact_sup_matches_brute():
    rng = np.random.default_rng(2)
    vals = rng.exponential(size=40)
    w = rng.uniform(0.1, 1, 40)
    _, sup = weak_quotient(vals, w, 3.0)
    brute = max(x * w[vals > x].sum() / 3.0 for x in np.concatenate([vals - 1e-12, vals]))
    assert sup == pytest.approx(brute, rel=1e-9)
    assert weak_quotient(vals, w, 0.0) == ([], 0.0)


def test_weak11_zero_and_scaling():
    mu = AtomicMeasure.uniform_grid(32)
    k, p = model_kernel(1.0, 1.0), OperatorParams(t_lo=1 / 32)
    assert weak11_harness(ComplexMeasure.from_density(0.0, mu), mu, k, p).sup == 0.0
    nu, _ = spiky(3, K=32)
    a = weak11_harness(nu, mu, k, p)
    b = weak11_harness(ComplexMeasure(nu.points, 2 * nu.weights), mu, k, p)
    assert a.sup == pytest.approx(b.sup, rel=1e-9) and a.excluded == 0


def test_weak11_untruncated_excludes_atoms():
    nu, mu = spiky(4, K=32)
    res = weak11_harness(nu, mu, model_kernel(1.0, 1.0), OperatorParams())
    assert res.excluded > 0
