import math
import warnings

import numpy as np
import pytest

from tailtreat._rng import stream
from tailtreat.dataset import Dataset
from tailtreat.estimator import ThetaPair, fit_ctate, fit_profile
from tailtreat.exceptions import InferenceError
from tailtreat.inference import (Band, BootstrapConfig, bootstrap, bootstrap_pointwise_band,
                                 coefficient_index, critical_value, default_bandwidth,
                                 estimate_weights, iqate_se, iqate_se_from_moments, pointwise_band,
                                 powell_density, profile_covariances, residual_scale,
                                 sandwich_covariance, simultaneous_band)
from tailtreat.nuisance import unit_weights
from tailtreat.simulation import DGPConfig, generate

from test_estimator import fake_profile


def test_powell_examples():
    np.testing.assert_array_equal(powell_density([-0.2, 0.1, 0.8], 0.5), [1, 1, 0])
    np.testing.assert_array_equal(powell_density([2.0, -3.0], 0.5), [0, 0])
    r = np.random.default_rng(0).uniform(-1, 1, 100_000)
    assert powell_density(r, 0.5).mean() == pytest.approx(0.5, abs=0.02)


def test_bandwidth():
    assert default_bandwidth(1000, 1.0) == pytest.approx(0.106, abs=1e-12)
    with pytest.raises(InferenceError):
        default_bandwidth(1000, 0.0)
    lam = np.array([default_bandwidth(n, 1.0) for n in (10**3, 10**5, 10**7)])
    assert np.all(np.diff(lam) < 0)
    assert np.all(np.diff(1 / lam / np.sqrt([10**3, 10**5, 10**7])) < 0)
    assert residual_scale([-1.0, 0.0, 1.0]) == pytest.approx(1.4826)


@pytest.fixture(scope="module")
def sim_fit():
    sim = generate(DGPConfig(n=1000, rho=0.5), rng=stream(21, 0))
    ds = sim.data
    w = estimate_weights(ds, "projected", 2)
    prof = fit_profile(ds, w, [0.25, 0.5, 0.75])
    return ds, w, prof


def test_sandwich_structure(sim_fit):
    ds, w, prof = sim_fit
    c = sandwich_covariance(ds, w, w.probit, prof.fit_at(0.5))
    k = ds.p + 2
    assert np.all(np.diag(c.cov) >= 0)
    np.testing.assert_allclose(c.H_hat, c.H_hat.T)
    assert np.all(c.H_hat[:k, k:] == 0) and np.all(c.H_hat[k:, :k] == 0)
    assert np.linalg.eigvalsh(c.Omega_hat).min() >= -1e-12
    assert c.nuisance_corrected
    plain = sandwich_covariance(ds, w, w.probit, prof.fit_at(0.5), correct_nuisance=False)
    assert not np.allclose(plain.Omega_hat, c.Omega_hat)
    assert c.se[coefficient_index("ctate", k)] == pytest.approx(math.sqrt(c.cov[k, k]))


def test_singular_hessian_hint():
    ds = Dataset(np.r_[np.zeros(20), np.ones(20) * 10], np.arange(40) % 2, np.arange(40) % 2,
                 np.empty((40, 0)))
    fit, _ = fit_ctate(ds, np.ones(40), 0.5)
    # move the quantile line off every observation: all Powell weights vanish
    off = ThetaPair(fit.tau, fit.theta1 + np.array([0.0, 0.5]), fit.theta2)
    with pytest.raises(InferenceError, match="larger bandwidth"):
        sandwich_covariance(ds, unit_weights(40), None, off, bandwidth=1e-3)


def test_pointwise_band(sim_fit):
    ds, w, prof = sim_fit
    covs = profile_covariances(ds, prof)
    band = pointwise_band(prof, covs, 0.95, "ctate")
    k = ds.p + 2
    for j, c in enumerate(covs):
        half = (band.upper[j] - band.lower[j]) / 2
        assert half == pytest.approx(1.959963984540054 * math.sqrt(c.cov[k, k]), rel=1e-12)
    assert 1.959963984540054 == pytest.approx(1.95996, abs=1e-5)
    zero = [type(c)(**{**c.__dict__, "cov": np.zeros_like(c.cov)}) for c in covs]
    flat = pointwise_band(prof, zero, 0.95)
    np.testing.assert_array_equal(flat.lower, flat.center)
    with pytest.raises(ValueError):
        pointwise_band(prof, covs, 1.5)


def test_iqate_se_algebra():
    v = 0.37
    assert iqate_se_from_moments(v, v, v, 0.5, 0.25) == pytest.approx(math.sqrt(v), abs=1e-10)
    with pytest.warns(RuntimeWarning):
        assert iqate_se_from_moments(1.0, 4.0, 2.0 + 1e-14, 0.5, 0.25) == 0.0
    with pytest.raises(InferenceError):
        iqate_se_from_moments(0.0, 0.0, 1.0, 0.5, 0.25)
    with pytest.raises(ValueError):
        iqate_se_from_moments(1.0, 1.0, 0.0, 0.25, 0.25)


def test_iqate_se_from_fits(sim_fit):
    ds, w, prof = sim_fit
    covs = profile_covariances(ds, prof)
    k = ds.p + 2
    se = iqate_se(covs[1], covs[0])
    hi, lo = covs[1], covs[0]
    cross = hi.H_inv @ (hi.J.T @ lo.J / ds.n) @ lo.H_inv / ds.n
    rad = (0.25 * hi.cov[k, k] + 0.0625 * lo.cov[k, k] - 0.25 * cross[k, k]) / 0.0625
    assert se == pytest.approx(math.sqrt(rad), rel=1e-12)


def test_iqate_se_orthogonal_pieces():
    """With orthogonal J columns across levels the cross term vanishes."""
    from tailtreat.inference import CovarianceEstimate
    n, k = 4, 1
    Jh = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    Jl = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    Jh[:, 1] = [1.0, 1.0, -1.0, -1.0]
    Jl[:, 1] = [1.0, -1.0, 1.0, -1.0]
    I = np.eye(2)

    def make(J, tau):
        cov = J.T @ J / n / n
        return CovarianceEstimate(tau=tau, H_hat=I, Omega_hat=J.T @ J / n, cov=cov, bandwidth=1.0,
                                  J=J, H_inv=I, nuisance_corrected=False)

    hi, lo = make(Jh, 0.5), make(Jl, 0.25)
    assert (Jh.T @ Jl)[k, k] == 0
    expect = math.sqrt((0.25 * hi.cov[k, k] + 0.0625 * lo.cov[k, k]) / 0.0625)
    assert iqate_se(hi, lo) == pytest.approx(expect)


def test_critical_value():
    assert critical_value([1.0, 2.0, 3.0, 4.0], 0.95) == 4.0
    assert critical_value([3.0, 1.0, 2.0, 4.0], 0.5) == 2.0


def test_band_validation():
    with pytest.raises(InferenceError):
        Band(np.array([0.5]), np.array([0.0]), np.array([1.0]), np.array([2.0]), "pointwise", 0.95)


def test_bootstrap_reproducible_and_bands():
    sim = generate(DGPConfig(n=400, rho=0.5), rng=stream(31, 0))
    ds = sim.data
    grid = (0.25, 0.5, 0.75)
    cfg = BootstrapConfig(B=30, seed=9, grid=grid)
    a = bootstrap(ds, cfg)
    b = bootstrap(ds, cfg)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    assert a.seeds == b.seeds and a.seeds[0] == "philox:9/0"
    prof = fit_profile(ds, estimate_weights(ds, "projected", 2), grid)
    for coef in ("ctate", "qte"):
        scb = simultaneous_band(prof, a, coef)
        pcb = bootstrap_pointwise_band(prof, a, coef)
        assert np.all(scb.width >= pcb.width - 1e-12)
    two = bootstrap(ds, BootstrapConfig(B=2, seed=1, grid=grid))
    np.testing.assert_array_equal(two.estimates, bootstrap(ds, BootstrapConfig(B=2, seed=1, grid=grid)).estimates)


def test_bootstrap_parallel_matches_serial():
    sim = generate(DGPConfig(n=300), rng=stream(32, 0))
    cfg = BootstrapConfig(B=6, seed=2, grid=(0.5,), weighting="unit")
    par = BootstrapConfig(B=6, seed=2, grid=(0.5,), weighting="unit", threads=2)
    np.testing.assert_array_equal(bootstrap(sim.data, cfg).estimates, bootstrap(sim.data, par).estimates)


def test_degenerate_bootstrap():
    ds = Dataset([1.0], [1], [1], np.empty((1, 0)))
    one = Dataset(np.r_[ds.y, 2.0], [1, 0], [1, 0], np.empty((2, 0)))
    with pytest.raises(InferenceError):
        bootstrap(ds, BootstrapConfig(B=5, grid=(0.5,), weighting="unit"))
    with pytest.raises(ValueError):
        bootstrap(one, BootstrapConfig(B=1, grid=(0.5,)))


def test_constant_draws_rejected():
    prof = fake_profile([0.5], [1.0])
    from tailtreat.inference import BootstrapResult
    boot = BootstrapResult(grid=np.array([0.5]), estimates=np.ones((5, 1, 4)), seeds=(), failures=0,
                           n=10, requested=5)
    with pytest.raises(InferenceError, match="zero bootstrap"):
        simultaneous_band(prof, boot)
