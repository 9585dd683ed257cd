"""Instrument propensity, projected instrument and complier weights."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr
from scipy.stats import norm

from .dataset import Dataset
from .exceptions import DataError, EstimationError, SeparationError, ConvergenceError

__all__ = [
    "PROPENSITY_CLIP",
    "ProbitModel",
    "PowerSeriesModel",
    "WeightSet",
    "fit_probit",
    "probit_influence",
    "monomial_exponents",
    "polynomial_basis",
    "fit_power_series",
    "abadie_weights",
    "compute_weights",
    "unit_weights",
    "oracle_weights_m2",
    "truncate",
]

PROPENSITY_CLIP = 1e-3
RIDGE = 1e-8


def _propensity_design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


@dataclass(frozen=True, eq=False)
class ProbitModel:
    """Probit fit of Z on [1, X].

    ``info_inverse`` is the inverse of the average negative Hessian, so the
    estimated covariance of ``gamma`` is ``info_inverse / n``.
    """

    gamma: np.ndarray
    info_inverse: np.ndarray
    converged: bool
    iterations: int

    def linear_index(self, x: np.ndarray) -> np.ndarray:
        return _propensity_design(np.asarray(x, dtype=float).reshape(len(x), -1)) @ self.gamma

    def predict(self, x: np.ndarray, clip: bool = True) -> np.ndarray:
        pi = ndtr(self.linear_index(x))
        return np.clip(pi, PROPENSITY_CLIP, 1 - PROPENSITY_CLIP) if clip else pi


def _probit_parts(A, z, gamma):
    xb = A @ gamma
    # inverse Mills ratios computed on the log scale to stay finite in the tails
    lam1 = np.exp(norm.logpdf(xb) - log_ndtr(xb))
    lam0 = np.exp(norm.logpdf(xb) - log_ndtr(-xb))
    score_w = np.where(z == 1, lam1, -lam0)
    loglik = np.sum(np.where(z == 1, log_ndtr(xb), log_ndtr(-xb)))
    # d score_w / d xb
    h = np.where(z == 1, -lam1 * (xb + lam1), -lam0 * (lam0 - xb))
    return loglik, score_w, h


def fit_probit(ds: Dataset, tol: float = 1e-10, max_iter: int = 100) -> ProbitModel:
    """Probit MLE of the instrument on an intercept and the covariates (Newton)."""
    A = _propensity_design(ds.x)
    z = ds.z.astype(float)
    n, m = A.shape
    if np.all(z == z[0]):
        raise DataError("instrument has no variation", column="z")
    if np.linalg.matrix_rank(A) < m:
        raise DataError("propensity design [1, x] is rank deficient")
    gamma = np.zeros(m)
    gamma[0] = norm.ppf(np.clip(z.mean(), 1e-6, 1 - 1e-6))
    loglik, s, h = _probit_parts(A, z, gamma)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = A.T @ s / n
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        info = -(A * h[:, None]).T @ A / n
        step = np.linalg.solve(info, grad)
        t = 1.0
        while True:
            cand = gamma + t * step
            ll_c, s_c, h_c = _probit_parts(A, z, cand)
            if ll_c >= loglik - 1e-12 * abs(loglik) or t < 1e-8:
                break
            t *= 0.5
        gamma, loglik, s, h = cand, ll_c, s_c, h_c
        if np.max(np.abs(gamma)) > 50:
            raise SeparationError("probit coefficients diverge: the instrument is (quasi-)perfectly "
                                  "predicted by the covariates")
    else:
        grad = A.T @ s / n
        converged = bool(np.max(np.abs(grad)) <= tol)
    if np.max(np.abs(gamma)) > 50:
        raise SeparationError("probit coefficients diverge: perfect separation")
    if not converged:
        raise ConvergenceError(f"probit Newton iterations did not converge in {max_iter} steps")
    info = -(A * h[:, None]).T @ A / n
    info_inv = np.linalg.inv(info)
    info_inv = 0.5 * (info_inv + info_inv.T)
    return ProbitModel(gamma=gamma, info_inverse=info_inv, converged=converged, iterations=it)


def probit_influence(model: ProbitModel, ds: Dataset) -> np.ndarray:
    """Influence function rows psi(X_i) = info_inverse s(gamma; X_i), shape (n, p + 1)."""
    if not model.converged:
        raise EstimationError("probit model did not converge")
    A = _propensity_design(ds.x)
    _, s, _ = _probit_parts(A, ds.z.astype(float), model.gamma)
    return (A * s[:, None]) @ model.info_inverse.T


def monomial_exponents(n_vars: int, degree: int) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials of total degree <= ``degree``, graded order."""
    out = []
    for deg in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for j in combo:
                e[j] += 1
            out.append(tuple(e))
    return out


def polynomial_basis(V: np.ndarray, exponents) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    return np.column_stack([np.prod(V ** np.array(e), axis=1) for e in exponents])


def _lstsq(B: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, bool]:
    """QR least squares; ridge with lambda = 1e-8 on the scaled normal equations if rank deficient."""
    Q, R = np.linalg.qr(B)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() > 1e-10 * max(diag.max(), 1.0):
        return np.linalg.solve(R, Q.T @ t), False
    n = B.shape[0]
    G = B.T @ B / n
    return np.linalg.solve(G + RIDGE * np.eye(G.shape[0]), B.T @ t / n), True


@dataclass(frozen=True, eq=False)
class PowerSeriesModel:
    """Per treatment-group polynomial regression of Z on (Y, X)."""

    degree: int
    exponents: tuple[tuple[int, ...], ...]
    coef: dict = field(default_factory=dict)
    ridge_used: dict = field(default_factory=dict)

    def predict(self, y, d, x) -> np.ndarray:
        V = np.column_stack([np.asarray(y, dtype=float), np.asarray(x, dtype=float).reshape(len(y), -1)])
        d = np.asarray(d)
        B = polynomial_basis(V, self.exponents)
        out = np.empty(len(y))
        for m in (0, 1):
            mask = d == m
            if mask.any():
                out[mask] = B[mask] @ self.coef[m]
        return np.clip(out, 0.0, 1.0)


def fit_power_series(ds: Dataset, degree: int = 2, y_degree: int | None = None) -> PowerSeriesModel:
    """Series estimate of E[Z | Y, D, X], fitted separately within D = 0 and D = 1.

    The basis holds all monomials in (Y, X) of total degree <= ``degree``,
    plus pure powers of Y up to ``y_degree`` when that is larger.
    """
    if degree < 1:
        raise ValueError("degree must be a positive integer")
    exps = monomial_exponents(1 + ds.p, degree)
    for k in range(degree + 1, (y_degree or 0) + 1):
        exps.append((k,) + (0,) * ds.p)
    exps = tuple(exps)
    V = np.column_stack([ds.y, ds.x])
    B = polynomial_basis(V, exps)
    coef, ridge = {}, {}
    for m in (0, 1):
        mask = ds.d == m
        if not mask.any():
            raise DataError(f"treatment group d={m} is empty")
        if mask.sum() < len(exps):
            raise EstimationError(f"group d={m} has {int(mask.sum())} rows but the degree-{degree} "
                                  f"basis has {len(exps)} terms; lower the degree")
        coef[m], ridge[m] = _lstsq(B[mask], ds.z[mask].astype(float))
    return PowerSeriesModel(degree=degree, exponents=exps, coef=coef, ridge_used=ridge)


def truncate(k) -> np.ndarray:
    return np.clip(np.asarray(k, dtype=float), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Raw, projected and truncated complier weights plus the models behind them."""

    raw: np.ndarray
    projected: np.ndarray
    truncated: np.ndarray
    propensity: np.ndarray | None = None
    probit: ProbitModel | None = None
    vmodel: object | None = None
    kind: str = "projected"

    @property
    def complier_share_estimate(self) -> float:
        return float(np.mean(self.truncated))

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "complier_share_estimate": self.complier_share_estimate,
            "raw_mean": float(np.mean(self.raw)),
            "raw_negative_share": float(np.mean(self.raw < 0)),
            "projected_min": float(np.min(self.projected)),
            "projected_max": float(np.max(self.projected)),
            "truncated_zero_share": float(np.mean(self.truncated == 0)),
        }


def abadie_weights(d, z, pi) -> np.ndarray:
    """K = 1 - D(1 - Z)/(1 - pi) - (1 - D)Z/pi; ``z`` may be a projection in [0, 1]."""
    d = np.asarray(d, dtype=float)
    z = np.asarray(z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    return 1.0 - d * (1.0 - z) / (1.0 - pi) - (1.0 - d) * z / pi


def compute_weights(ds: Dataset, probit: ProbitModel, vmodel: PowerSeriesModel) -> WeightSet:
    pi = probit.predict(ds.x)
    if np.any(pi < PROPENSITY_CLIP) or np.any(pi > 1 - PROPENSITY_CLIP):
        raise EstimationError("propensity outside the clipping range")
    vhat = vmodel.predict(ds.y, ds.d, ds.x)
    raw = abadie_weights(ds.d, ds.z, pi)
    proj = abadie_weights(ds.d, vhat, pi)
    return WeightSet(raw=raw, projected=proj, truncated=truncate(proj), propensity=pi,
                     probit=probit, vmodel=vmodel, kind="projected")


def unit_weights(n: int, mask=None) -> WeightSet:
    """Weights of one (optionally zero outside ``mask``): no endogeneity adjustment."""
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    return WeightSet(raw=w.copy(), projected=w.copy(), truncated=w.copy(), kind="unit")


@dataclass(frozen=True, eq=False)
class _PooledSeries:
    exponents: tuple
    coef: np.ndarray
    ridge_used: bool


def oracle_weights_m2(sim, probit: ProbitModel, degree: int = 2) -> WeightSet:
    """Projection of the raw weight on a polynomial in (Y, D, X, D0, D1).

    Needs the latent potential treatment statuses, so only simulated data
    qualify.
    """
    d0 = getattr(sim, "d0", None)
    d1 = getattr(sim, "d1", None)
    if d0 is None or d1 is None:
        raise DataError("latent potential treatment statuses (d0, d1) are required")
    ds = sim.data if hasattr(sim, "data") else sim
    pi = probit.predict(ds.x)
    raw = abadie_weights(ds.d, ds.z, pi)
    V = np.column_stack([ds.y, ds.d, ds.x, d0, d1])
    exps = tuple(monomial_exponents(V.shape[1], degree))
    B = polynomial_basis(V, exps)
    coef, ridge = _lstsq(B, raw)
    proj = B @ coef
    return WeightSet(raw=raw, projected=proj, truncated=truncate(proj), propensity=pi,
                     probit=probit, vmodel=_PooledSeries(exps, coef, ridge), kind="oracle_m2")
