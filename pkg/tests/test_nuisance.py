import numpy as np
import pytest
from scipy.stats import norm

from tailtreat._rng import stream
from tailtreat.dataset import Dataset
from tailtreat.exceptions import DataError, SeparationError
from tailtreat.nuisance import (abadie_weights, compute_weights, fit_power_series, fit_probit,
                                monomial_exponents, oracle_weights_m2, polynomial_basis,
                                probit_influence, truncate, unit_weights)
from tailtreat.simulation import DGPConfig, generate

PC = norm.cdf(0.67) - norm.cdf(-0.67)


def intercept_only(zbar, n=10000):
    m = int(round(zbar * n))
    z = np.r_[np.ones(m), np.zeros(n - m)]
    return Dataset(np.zeros(n), z, z, np.empty((n, 0)))


def test_probit_intercept_only():
    assert fit_probit(intercept_only(0.5)).gamma[0] == pytest.approx(0.0, abs=1e-12)
    g = fit_probit(intercept_only(0.8413)).gamma[0]
    assert g == pytest.approx(norm.ppf(0.8413), abs=1e-8)
    assert g == pytest.approx(1.0, abs=1e-3)


def test_probit_separation():
    x = np.linspace(-1, 1, 40)
    z = (x > 0).astype(int)
    with pytest.raises(SeparationError):
        fit_probit(Dataset(np.zeros(40), z, z, x[:, None]))


def test_probit_recovers_truth_and_influence():
    sim = generate(DGPConfig(n=20000, seed=4))
    model = fit_probit(sim.data)
    np.testing.assert_allclose(model.gamma, [-1.0, 1.0, 1.0], atol=0.1)
    psi = probit_influence(model, sim.data)
    np.testing.assert_allclose(psi.mean(axis=0), 0.0, atol=1e-8)
    # influence outer product reproduces the information-matrix variance
    np.testing.assert_allclose(psi.T @ psi / sim.data.n, model.info_inverse, rtol=0.1, atol=0.05)


def test_probit_sampling_variance():
    draws = []
    for r in range(150):
        sim = generate(DGPConfig(n=800), rng=stream(77, r))
        draws.append(fit_probit(sim.data).gamma)
    emp = np.var(np.array(draws), axis=0, ddof=1)
    ref = fit_probit(generate(DGPConfig(n=800), rng=stream(78, 0)).data).info_inverse / 800
    np.testing.assert_allclose(emp, np.diag(ref), rtol=0.35)


def test_monomials():
    assert len(monomial_exponents(3, 2)) == 10
    exps = monomial_exponents(2, 1)
    assert exps == [(0, 0), (1, 0), (0, 1)]
    B = polynomial_basis(np.array([[2.0, 3.0]]), monomial_exponents(2, 2))
    assert sorted(B[0].tolist()) == sorted([1, 2, 3, 4, 6, 9])


def test_power_series_constant_within_group(rng):
    n = 100
    d = np.r_[np.zeros(50), np.ones(50)].astype(int)
    z = np.r_[np.ones(50), rng.integers(0, 2, 50)].astype(int)
    ds = Dataset(rng.normal(size=n), d, z, rng.uniform(size=(n, 1)))
    model = fit_power_series(ds, degree=1)
    np.testing.assert_allclose(model.predict(ds.y, ds.d, ds.x)[:50], 1.0, atol=1e-10)
    assert len(model.exponents) == 3


def test_abadie_examples():
    assert abadie_weights(1, 1, 0.3) == pytest.approx(1.0)
    assert abadie_weights(1, 0, 0.5) == pytest.approx(-1.0)
    np.testing.assert_array_equal(truncate([-0.3, 0.4, 1.2]), [0.0, 0.4, 1.0])
    t = truncate([-2.0, 0.5, 3.0])
    np.testing.assert_array_equal(truncate(t), t)


def test_complier_share_and_identity():
    sim = generate(DGPConfig(n=3000, rho=0.5), rng=stream(5, 0))
    ds = sim.data
    w = compute_weights(ds, fit_probit(ds), fit_power_series(ds, 2))
    assert w.complier_share_estimate == pytest.approx(PC, abs=0.04)
    assert np.all((w.truncated >= 0) & (w.truncated <= 1))
    for h in (np.ones(ds.n), ds.y):
        diff = (w.raw - w.projected) * h
        se = diff.std(ddof=1) / np.sqrt(ds.n)
        assert abs(diff.mean()) <= 3 * se


def test_oracle_m2_weights():
    sim = generate(DGPConfig(n=3000, rho=0.5), rng=stream(6, 0))
    assert np.all(sim.d0[sim.complier] == 0) and np.all(sim.d1[sim.complier] == 1)
    w = oracle_weights_m2(sim, fit_probit(sim.data), degree=2)
    assert w.complier_share_estimate == pytest.approx(sim.complier.mean(), abs=0.05)
    w1 = oracle_weights_m2(sim, fit_probit(sim.data), degree=1)
    assert len(w1.vmodel.exponents) == 1 + 6
    with pytest.raises(DataError):
        oracle_weights_m2(sim.data, fit_probit(sim.data))


def test_unit_weights():
    w = unit_weights(4, mask=[True, False, True, False])
    np.testing.assert_array_equal(w.truncated, [1, 0, 1, 0])
    assert w.kind == "unit"


def test_extra_outcome_powers(rng):
    n = 200
    ds = Dataset(rng.normal(size=n), rng.integers(0, 2, n), rng.integers(0, 2, n), rng.uniform(size=(n, 2)))
    base = fit_power_series(ds, 2)
    extra = fit_power_series(ds, 2, y_degree=3)
    assert len(extra.exponents) == len(base.exponents) + 1
    assert extra.exponents[-1] == (3, 0, 0)
    assert fit_power_series(ds, 2, y_degree=2).exponents == base.exponents
