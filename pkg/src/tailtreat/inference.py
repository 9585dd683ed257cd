"""Analytic sandwich covariance, IQATE standard errors and bootstrap bands."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._rng import stream, stream_id
from ._validation import check_grid
from .dataset import Dataset, design_matrix
from .estimator import FitConfig, ProfileFit, ThetaPair, fit_profile
from .exceptions import DataError, EstimationError, InferenceError
from .fzloss import fz_sp_gradient_matrix, sigmoid, sigmoid_prime
from .nuisance import (ProbitModel, WeightSet, compute_weights, fit_power_series, fit_probit,
                       probit_influence, unit_weights)

__all__ = [
    "CovarianceEstimate",
    "BootstrapConfig",
    "BootstrapResult",
    "Band",
    "powell_density",
    "default_bandwidth",
    "residual_scale",
    "sandwich_covariance",
    "profile_covariances",
    "coefficient_index",
    "pointwise_band",
    "iqate_se",
    "iqate_se_from_moments",
    "bootstrap",
    "critical_value",
    "simultaneous_band",
    "bootstrap_pointwise_band",
]


def powell_density(residuals, lam: float) -> np.ndarray:
    """Indicator-kernel density at zero: 1{|r| <= lam} / (2 lam)."""
    if not lam > 0:
        raise ValueError("bandwidth must be positive")
    r = np.asarray(residuals, dtype=float)
    return (np.abs(r) <= lam) / (2.0 * lam)


def residual_scale(residuals) -> float:
    r = np.asarray(residuals, dtype=float)
    return 1.4826 * float(np.median(np.abs(r - np.median(r))))


def default_bandwidth(n: int, residual_scale: float) -> float:
    """1.06 * scale * n^(-1/3)."""
    if n < 2:
        raise ValueError("need n >= 2")
    if not residual_scale > 0:
        raise InferenceError("zero residual scale: degenerate quantile fit")
    return 1.06 * residual_scale * n ** (-1.0 / 3.0)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Plug-in sandwich H^-1 Omega H^-1 / n for the stacked (theta1, theta2).

    ``J`` holds the per-observation estimating-function rows, kept so that
    cross-level covariances (IQATE standard errors) can be assembled.
    """

    tau: float
    H_hat: np.ndarray
    Omega_hat: np.ndarray
    cov: np.ndarray
    bandwidth: float
    J: np.ndarray
    H_inv: np.ndarray
    nuisance_corrected: bool

    @property
    def n(self) -> int:
        return self.J.shape[0]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def _grad_gamma_k(ds: Dataset, probit: ProbitModel) -> np.ndarray:
    """d K_i / d gamma for the probit propensity, shape (n, p + 1)."""
    A = np.column_stack([np.ones(ds.n), ds.x])
    pi = probit.predict(ds.x)
    d = ds.d.astype(float)
    z = ds.z.astype(float)
    dk_dpi = (1 - d) * z / pi ** 2 - d * (1 - z) / (1 - pi) ** 2
    return (dk_dpi * norm.pdf(A @ probit.gamma))[:, None] * A


def sandwich_covariance(ds: Dataset, weights: WeightSet, probit: ProbitModel | None,
                        fit: ThetaPair, bandwidth: float | None = None,
                        correct_nuisance: bool = True) -> CovarianceEstimate:
    """Analytic covariance of the stacked coefficients at ``fit.tau``.

    The Hessian is block diagonal: the quantile block uses a Powell density
    estimate at the fitted quantile, the tail block the softplus curvature.
    With a probit model the estimating function is augmented by M psi(X)
    to account for the estimated propensity; pass ``probit=None`` (or
    ``correct_nuisance=False``) for unit or known weights.
    """
    tau = fit.tau
    W = design_matrix(ds)
    n, k = W.shape
    Kt = np.asarray(weights.truncated, dtype=float)
    raw = np.asarray(weights.raw, dtype=float)
    q = W @ fit.theta1
    e = W @ fit.theta2
    resid = ds.y - q
    if bandwidth is None:
        bandwidth = default_bandwidth(n, residual_scale(resid[Kt > 0]))
    vs = powell_density(resid, bandwidth)
    c11 = (W * (Kt * vs * sigmoid(e) / tau)[:, None]).T @ W / n
    c22 = (W * (Kt * sigmoid_prime(e))[:, None]).T @ W / n
    H = np.zeros((2 * k, 2 * k))
    H[:k, :k] = c11
    H[k:, k:] = c22
    try:
        H_inv = np.zeros_like(H)
        H_inv[:k, :k] = np.linalg.inv(c11)
        H_inv[k:, k:] = np.linalg.inv(c22)
        if np.linalg.cond(c11) > 1e12 or np.linalg.cond(c22) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise InferenceError(f"Hessian estimate is singular at tau={tau} "
                             f"(bandwidth {bandwidth:.3g}); try a larger bandwidth") from None
    G = fz_sp_gradient_matrix(fit.theta1, fit.theta2, W, ds.y, tau)
    J = raw[:, None] * G
    corrected = probit is not None and correct_nuisance
    if corrected:
        M = G.T @ _grad_gamma_k(ds, probit) / n
        J = J + probit_influence(probit, ds) @ M.T
    Omega = J.T @ J / n
    cov = H_inv @ Omega @ H_inv / n
    cov = 0.5 * (cov + cov.T)
    return CovarianceEstimate(tau=tau, H_hat=H, Omega_hat=Omega, cov=cov, bandwidth=float(bandwidth),
                              J=J, H_inv=H_inv, nuisance_corrected=corrected)


def profile_covariances(ds: Dataset, profile: ProfileFit, bandwidth: float | None = None) -> list:
    """sandwich_covariance at each fitted level (None where the fit or inference failed)."""
    w = profile.weights_used
    out = []
    for fit in profile.fits:
        if fit is None:
            out.append(None)
            continue
        try:
            out.append(sandwich_covariance(ds, w, w.probit, fit, bandwidth))
        except InferenceError:
            out.append(None)
    return out


def coefficient_index(selector, k: int) -> int:
    """Position in the stacked (theta1, theta2) vector; ``"qte"`` -> 0, ``"ctate"`` -> k."""
    if selector in ("qte", "alpha1"):
        return 0
    if selector in ("ctate", "alpha2"):
        return k
    j = int(selector)
    if not 0 <= j < 2 * k:
        raise ValueError(f"coefficient index {j} out of range")
    return j


@dataclass(frozen=True, eq=False)
class Band:
    tau: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    level: float

    def __post_init__(self):
        ok = ~np.isnan(self.center)
        if np.any(self.lower[ok] > self.center[ok]) or np.any(self.center[ok] > self.upper[ok]):
            raise InferenceError("band bounds do not bracket the center")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _check_level(level) -> float:
    level = float(level)
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    return level


def pointwise_band(profile: ProfileFit, covariances, level: float = 0.95,
                   coefficient="ctate") -> Band:
    """center +/- z_{1-g/2} * se from the analytic covariances."""
    level = _check_level(level)
    zq = norm.ppf(0.5 + level / 2)
    center, half = [], []
    for fit, c in zip(profile.fits, covariances):
        if fit is None or c is None:
            center.append(np.nan)
            half.append(np.nan)
            continue
        j = coefficient_index(coefficient, fit.theta1.size)
        center.append(fit.stacked[j])
        half.append(zq * math.sqrt(max(c.cov[j, j], 0.0)))
    center, half = np.array(center), np.array(half)
    return Band(np.asarray(profile.grid), center, center - half, center + half, "pointwise", level)


def iqate_se_from_moments(var_hi: float, var_lo: float, cov: float, tau_hi: float,
                          tau_lo: float) -> float:
    """sqrt{(tau_hi - tau_lo)^-2 [tau_hi^2 V_hi + tau_lo^2 V_lo - 2 tau_hi tau_lo C]}."""
    if not tau_lo < tau_hi:
        raise ValueError("tau_lo must be smaller than tau_hi")
    rad = (tau_hi ** 2 * var_hi + tau_lo ** 2 * var_lo - 2 * tau_hi * tau_lo * cov) / (tau_hi - tau_lo) ** 2
    if rad < 0:
        if rad < -1e-12:
            raise InferenceError(f"negative IQATE variance {rad:.3g}")
        warnings.warn("clamping slightly negative IQATE variance to zero", RuntimeWarning)
        rad = 0.0
    return math.sqrt(rad)


def iqate_se(cov_hi: CovarianceEstimate, cov_lo: CovarianceEstimate, tau_hi: float | None = None,
             tau_lo: float | None = None) -> float:
    """Standard error of the IQATE between two levels from their sandwich pieces."""
    tau_hi = cov_hi.tau if tau_hi is None else tau_hi
    tau_lo = cov_lo.tau if tau_lo is None else tau_lo
    if cov_hi.n != cov_lo.n:
        raise InferenceError("covariance estimates come from different samples")
    n = cov_hi.n
    k = cov_hi.H_inv.shape[0] // 2
    cross = cov_hi.H_inv @ (cov_hi.J.T @ cov_lo.J / n) @ cov_lo.H_inv / n
    return iqate_se_from_moments(cov_hi.cov[k, k], cov_lo.cov[k, k], cross[k, k], tau_hi, tau_lo)


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 300
    seed: int = 0
    grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    weighting: str = "projected"
    degree: int = 2
    y_degree: int | None = None
    threads: int = 1
    max_failure_share: float = 0.2
    fit: FitConfig = field(default_factory=FitConfig)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap coefficient draws, shape (B_ok, len(grid), 2k).

    Failed replicates are dropped; ``B`` counts the surviving ones.
    """

    grid: np.ndarray
    estimates: np.ndarray
    seeds: tuple
    failures: int
    n: int
    requested: int

    @property
    def B(self) -> int:
        return self.estimates.shape[0]


def estimate_weights(ds: Dataset, weighting: str, degree: int, y_degree: int | None = None) -> WeightSet:
    if weighting == "unit":
        return unit_weights(ds.n)
    if weighting == "projected":
        ds.check_identified()
        return compute_weights(ds, fit_probit(ds), fit_power_series(ds, degree, y_degree))
    raise ValueError(f"unknown weighting {weighting!r}")


def _boot_rep(args):
    ds, cfg, b = args
    idx = stream(cfg.seed, b).integers(0, ds.n, size=ds.n)
    dsb = ds.take(idx)
    k = ds.p + 2
    try:
        w = estimate_weights(dsb, cfg.weighting, cfg.degree, cfg.y_degree)
        prof = fit_profile(dsb, w, cfg.grid, cfg.fit)
    except (EstimationError, DataError, np.linalg.LinAlgError):
        return b, None
    if prof.errors:
        return b, None
    return b, np.stack([f.stacked for f in prof.fits]).reshape(len(cfg.grid), 2 * k)


def bootstrap(ds: Dataset, config: BootstrapConfig) -> BootstrapResult:
    """Nonparametric bootstrap re-estimating the weights and the whole profile.

    Draw ``b`` uses the Philox stream keyed by ``(seed, b)``.
    """
    if config.B < 2:
        raise ValueError("B must be at least 2")
    grid = check_grid(config.grid)
    config = BootstrapConfig(**{**config.__dict__, "grid": tuple(float(t) for t in grid)})
    tasks = [(ds, config, b) for b in range(config.B)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as ex:
            res = list(ex.map(_boot_rep, tasks, chunksize=max(1, config.B // (4 * config.threads))))
    else:
        res = [_boot_rep(t) for t in tasks]
    res.sort(key=lambda t: t[0])
    ok = [r for r in res if r[1] is not None]
    failures = len(res) - len(ok)
    if failures > config.max_failure_share * config.B:
        raise InferenceError(f"{failures} of {config.B} bootstrap replicates failed")
    if not ok:
        raise InferenceError("all bootstrap replicates failed")
    return BootstrapResult(grid=grid, estimates=np.stack([r[1] for r in ok]),
                           seeds=tuple(stream_id(config.seed, r[0]) for r in ok),
                           failures=failures, n=ds.n, requested=config.B)


def critical_value(tstats, level: float) -> float:
    """The ceil(level * B)-th smallest of ``tstats``."""
    level = _check_level(level)
    t = np.sort(np.asarray(tstats, dtype=float))
    m = int(math.ceil(level * t.size - 1e-9))
    return float(t[max(m, 1) - 1])


def _boot_pieces(profile: ProfileFit, boot: BootstrapResult, coefficient):
    if not np.allclose(profile.grid, boot.grid):
        raise InferenceError("bootstrap grid does not match the profile grid")
    k = boot.estimates.shape[2] // 2
    j = coefficient_index(coefficient, k)
    center = np.array([f.stacked[j] if f is not None else np.nan for f in profile.fits])
    draws = boot.estimates[:, :, j]
    sd = draws.std(axis=0, ddof=1)
    if np.any(~(sd > 0)):
        raise InferenceError("zero bootstrap standard deviation at some level")
    return center, draws, sd


def simultaneous_band(profile: ProfileFit, boot: BootstrapResult, coefficient="ctate",
                      level: float = 0.95) -> Band:
    """Sup-t band: center +/- c * sd / sqrt(n), c the level-quantile of max_tau |t*|."""
    level = _check_level(level)
    center, draws, sd = _boot_pieces(profile, boot, coefficient)
    rn = math.sqrt(boot.n)
    t = rn * (draws - center) / sd
    crit = critical_value(np.max(np.abs(t), axis=1), level)
    half = crit * sd / rn
    return Band(np.asarray(profile.grid), center, center - half, center + half, "simultaneous", level)


def bootstrap_pointwise_band(profile: ProfileFit, boot: BootstrapResult, coefficient="ctate",
                             level: float = 0.95) -> Band:
    """Per-level bootstrap-t band from the same draws as :func:`simultaneous_band`.

    Uses the same order-statistic rule applied to |t*| at each level separately,
    so the simultaneous band always contains it.
    """
    level = _check_level(level)
    center, draws, sd = _boot_pieces(profile, boot, coefficient)
    rn = math.sqrt(boot.n)
    t = np.abs(rn * (draws - center) / sd)
    crit = np.array([critical_value(t[:, j], level) for j in range(t.shape[1])])
    half = crit * sd / rn
    return Band(np.asarray(profile.grid), center, center - half, center + half, "pointwise", level)
