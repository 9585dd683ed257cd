"""Weighted FZ-loss estimation of complier QTE and CTATE.

For each quantile level the quantile coefficients theta1 and tail-expectation
coefficients theta2 minimize

    n^-1 sum_i K_i FZsp(w_i'theta1, w_i'theta2, y_i),

with w_i = (d_i, 1, x_i). The problem is solved by block coordinate descent:
theta2 by damped Newton with theta1 fixed (a smooth problem), theta1 by
weighted quantile regression with weights K_i * sigmoid(w_i'theta2), which is
the exact minimizer over theta1 for fixed theta2.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_dataset, check_grid
from .dataset import Dataset, design_matrix
from .exceptions import ConvergenceError, DegenerateProblemError, EstimationError
from .fzloss import lq, sigmoid, sigmoid_prime, softplus
from .nuisance import WeightSet, compute_weights, fit_power_series, fit_probit, unit_weights
from .qreg import QRegProblem, solve_wqr

__all__ = [
    "FitConfig",
    "ThetaPair",
    "FitDiagnostics",
    "ProfileFit",
    "fit_ctate",
    "fit_profile",
    "iqate",
    "lorenz_ordinate",
    "lorenz_effect",
    "extract_ctate_qte",
    "CTATERegressor",
]


@dataclass(frozen=True)
class FitConfig:
    outer_tol: float = 1e-6
    max_outer: int = 100
    inner_tol: float = 1e-8
    max_inner: int = 500
    descent_slack: float = 1e-10
    warm_start: bool = False
    n_jobs: int = 1


@dataclass(frozen=True, eq=False)
class ThetaPair:
    """Coefficients at one level; index 0 of each block is the treatment effect."""

    tau: float
    theta1: np.ndarray
    theta2: np.ndarray

    @property
    def qte(self) -> float:
        return float(self.theta1[0])

    @property
    def ctate(self) -> float:
        return float(self.theta2[0])

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2])


@dataclass
class FitDiagnostics:
    outer_iterations: int = 0
    converged: bool = False
    final_objective: float = float("nan")
    objective_history: list = field(default_factory=list)
    cte_above_quantile_count: int = 0
    inner_iterations: int = 0
    monotone: bool = True

    def as_dict(self) -> dict:
        return {
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
            "final_objective": self.final_objective,
            "cte_above_quantile_count": self.cte_above_quantile_count,
            "inner_iterations": self.inner_iterations,
            "monotone": self.monotone,
        }


@dataclass(eq=False)
class ProfileFit:
    grid: np.ndarray
    fits: list
    weights_used: WeightSet
    diagnostics: list
    errors: dict = field(default_factory=dict)
    covariate_means: np.ndarray | None = None

    def fit_at(self, tau: float) -> ThetaPair:
        j = _grid_index(self.grid, tau)
        if self.fits[j] is None:
            raise EstimationError(f"no fit available at tau={tau}: {self.errors.get(j)}")
        return self.fits[j]

    @property
    def qte(self) -> np.ndarray:
        return np.array([f.qte if f is not None else np.nan for f in self.fits])

    @property
    def ctate(self) -> np.ndarray:
        return np.array([f.ctate if f is not None else np.nan for f in self.fits])


def _grid_index(grid, tau, atol=1e-9) -> int:
    hit = np.flatnonzero(np.abs(np.asarray(grid) - tau) <= atol)
    if hit.size == 0:
        raise ValueError(f"quantile level {tau} is not on the estimation grid")
    return int(hit[0])


def _theta2_objective(theta2, W, K, c):
    e = W @ theta2
    return float(np.mean(K * (sigmoid(e) * (e + c) - softplus(e))))


def _theta2_step(theta2, W, K, c, tol, max_iter):
    """Damped Newton for min_theta2 mean K [s(e)(e + c) - softplus(e)]; c = LQ(q, y).

    Not convex in general, so the Hessian is shifted until it is positive
    definite and each step is backtracked to an Armijo decrease.
    """
    n, k = W.shape
    f = _theta2_objective(theta2, W, K, c)
    for it in range(max_iter + 1):
        e = W @ theta2
        sp1 = sigmoid_prime(e)
        u = e + c
        grad = W.T @ (K * sp1 * u) / n
        if np.max(np.abs(grad)) <= tol:
            return theta2, f, it, True
        if it == max_iter:
            break
        curv = K * sp1 * ((1.0 - 2.0 * sigmoid(e)) * u + 1.0)
        H = (W * curv[:, None]).T @ W / n
        mu = 0.0
        scale = max(float(np.max(np.abs(np.diag(H)))), 1e-12)
        while True:
            try:
                L = np.linalg.cholesky(H + mu * np.eye(k))
                break
            except np.linalg.LinAlgError:
                mu = max(2.0 * mu, 1e-8 * scale)
        step = -np.linalg.solve(L.T, np.linalg.solve(L, grad))
        slope = float(grad @ step)
        t = 1.0
        while True:
            cand = theta2 + t * step
            fc = _theta2_objective(cand, W, K, c)
            if fc <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if fc > f:
            # no progress possible in floating point; accept current point
            return theta2, f, it, np.max(np.abs(grad)) <= 1e3 * tol
        theta2, f = cand, fc
    return theta2, f, max_iter, False


def _objective(W, y, K, theta1, theta2, tau):
    q = W @ theta1
    e = W @ theta2
    return float(np.mean(K * (sigmoid(e) * (e + lq(q, y, tau)) - softplus(e) + softplus(y))))


def fit_ctate(ds: Dataset, weights, tau: float, config: FitConfig | None = None,
              init: ThetaPair | None = None) -> tuple[ThetaPair, FitDiagnostics]:
    """Estimate (theta1, theta2) at level ``tau``.

    ``weights`` is a WeightSet (its truncated weights are used) or an array
    in [0, 1]. ``init`` warm-starts both blocks; by default theta1 starts at
    the weighted quantile regression with the complier weights and theta2 at
    zero.
    """
    config = config or FitConfig()
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    K = np.asarray(weights.truncated if isinstance(weights, WeightSet) else weights, dtype=float)
    if K.shape != (ds.n,):
        raise ValueError("weights must have one entry per observation")
    if np.any(K < 0) or np.any(K > 1):
        raise ValueError("weights must lie in [0, 1]")
    if not np.any(K > 0):
        raise DegenerateProblemError("all weights are zero")
    W = design_matrix(ds)
    y = ds.y
    k = W.shape[1]

    if init is None:
        theta1 = solve_wqr(QRegProblem(W, y, K, tau))
        theta2 = np.zeros(k)
    else:
        theta1 = np.array(init.theta1, dtype=float)
        theta2 = np.array(init.theta2, dtype=float)
    diag = FitDiagnostics()
    hist = [_objective(W, y, K, theta1, theta2, tau)]
    for it in range(1, config.max_outer + 1):
        c = lq(W @ theta1, y, tau)
        theta2_new, _, n_in, ok = _theta2_step(theta2, W, K, c, config.inner_tol, config.max_inner)
        diag.inner_iterations += n_in
        if not ok:
            raise ConvergenceError(f"theta2 step did not converge at tau={tau}")
        hist.append(_objective(W, y, K, theta1, theta2_new, tau))
        xi = K * sigmoid(W @ theta2_new)
        theta1_new = solve_wqr(QRegProblem(W, y, xi, tau), start=theta1)
        hist.append(_objective(W, y, K, theta1_new, theta2_new, tau))
        change = max(np.max(np.abs(theta1_new - theta1)), np.max(np.abs(theta2_new - theta2)))
        theta1, theta2 = theta1_new, theta2_new
        diag.outer_iterations = it
        if change <= config.outer_tol:
            diag.converged = True
            break
    diag.objective_history = hist
    diag.final_objective = hist[-1]
    diag.monotone = bool(np.all(np.diff(hist) <= config.descent_slack))
    if not diag.monotone:
        warnings.warn(f"FZ objective increased across iterations at tau={tau}", RuntimeWarning)
    diag.cte_above_quantile_count = int(np.sum(W @ theta2 > W @ theta1))
    return ThetaPair(float(tau), theta1, theta2), diag


def _fit_one(args):
    ds, K, tau, config, init = args
    try:
        return fit_ctate(ds, K, tau, config, init), None
    except EstimationError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def fit_profile(ds: Dataset, weights: WeightSet, grid, config: FitConfig | None = None) -> ProfileFit:
    """fit_ctate at every grid level; failures are recorded and the rest retained."""
    config = config or FitConfig()
    grid = check_grid(grid)
    K = np.asarray(weights.truncated, dtype=float)
    fits, diags, errors = [], [], {}
    if config.warm_start:
        prev = None
        results = []
        for tau in grid:
            res = _fit_one((ds, K, float(tau), config, prev))
            if res[0] is not None:
                prev = res[0][0]
            results.append(res)
    elif config.n_jobs > 1 and grid.size > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as ex:
            results = list(ex.map(_fit_one, [(ds, K, float(t), config, None) for t in grid]))
    else:
        results = [_fit_one((ds, K, float(t), config, None)) for t in grid]
    for j, (res, err) in enumerate(results):
        if res is None:
            fits.append(None)
            diags.append(None)
            errors[j] = err
        else:
            fits.append(res[0])
            diags.append(res[1])
    return ProfileFit(grid=grid, fits=fits, weights_used=weights, diagnostics=diags,
                      errors=errors, covariate_means=ds.x.mean(axis=0))


def iqate(profile: ProfileFit, tau_lo: float, tau_hi: float) -> float:
    """(tau_hi CTATE(tau_hi) - tau_lo CTATE(tau_lo)) / (tau_hi - tau_lo).

    ``tau_lo = 0`` is allowed and drops the lower term, giving CTATE(tau_hi).
    """
    if not tau_lo < tau_hi:
        raise ValueError("tau_lo must be smaller than tau_hi")
    hi = profile.fit_at(tau_hi).ctate
    lo = 0.0 if tau_lo == 0 else tau_lo * profile.fit_at(tau_lo).ctate
    return (tau_hi * hi - lo) / (tau_hi - tau_lo)


def lorenz_ordinate(tau, cte, mean) -> float:
    """tau * CTE(tau) / mean."""
    if mean == 0:
        raise ZeroDivisionError("Lorenz curve needs a nonzero mean")
    return float(tau * cte / mean)


def _arm_cte(fit: ThetaPair, d: int, xbar) -> float:
    return float(fit.theta2[0] * d + fit.theta2[1] + np.dot(fit.theta2[2:], xbar))


def lorenz_effect(profile: ProfileFit, tau: float, means: tuple[float, float] | None = None,
                  covariates=None) -> float:
    """LO(tau, 1) - LO(tau, 0) from the fitted complier CTE lines.

    CTEs are evaluated at ``covariates`` (default: sample covariate means).
    Without ``means`` each arm's overall mean is proxied by
    tau_max * CTE(tau_max) at the largest grid level.
    """
    xbar = profile.covariate_means if covariates is None else np.asarray(covariates, dtype=float)
    fit = profile.fit_at(tau)
    if means is None:
        tmax = float(profile.grid[-1])
        top = profile.fit_at(tmax)
        means = (tmax * _arm_cte(top, 0, xbar), tmax * _arm_cte(top, 1, xbar))
    m0, m1 = means
    return (lorenz_ordinate(tau, _arm_cte(fit, 1, xbar), m1)
            - lorenz_ordinate(tau, _arm_cte(fit, 0, xbar), m0))


def extract_ctate_qte(profile: ProfileFit) -> dict:
    """Columns tau, qte, ctate in grid order."""
    return {"tau": np.asarray(profile.grid, dtype=float), "qte": profile.qte, "ctate": profile.ctate}


class CTATERegressor(BaseEstimator):
    """Complier QTE and CTATE over a grid of quantile levels.

    Parameters
    ----------
    quantiles : sequence of levels in (0, 1), strictly increasing
    weighting : ``"projected"`` (instrument-based complier weights) or
        ``"unit"`` (no endogeneity adjustment)
    degree : total degree of the power series for E[Z | Y, D, X]
    outer_tol, max_outer : stopping rule of the alternating algorithm
    warm_start : start each level from the previous level's solution
    n_jobs : worker processes across levels

    Attributes
    ----------
    weights_ : WeightSet
    profile_ : ProfileFit
    qte_, ctate_ : (m,) arrays of treatment coefficients
    coef_quantile_, coef_cte_ : (m, p + 2) coefficient arrays, columns
        [treatment, intercept, covariates...]
    """

    def __init__(self, quantiles=(0.25, 0.5, 0.75), weighting="projected", degree=2,
                 outer_tol=1e-6, max_outer=100, warm_start=False, n_jobs=1):
        self.quantiles = quantiles
        self.weighting = weighting
        self.degree = degree
        self.outer_tol = outer_tol
        self.max_outer = max_outer
        self.warm_start = warm_start
        self.n_jobs = n_jobs

    def _config(self) -> FitConfig:
        return FitConfig(outer_tol=self.outer_tol, max_outer=self.max_outer,
                         warm_start=self.warm_start, n_jobs=self.n_jobs)

    def fit(self, X, y, treatment, instrument=None):
        grid = check_grid(self.quantiles)
        if self.weighting not in ("projected", "unit"):
            raise ValueError("weighting must be 'projected' or 'unit'")
        if self.weighting == "projected" and instrument is None:
            raise ValueError("projected weighting needs an instrument")
        ds = as_dataset(X, y, treatment, instrument)
        self.dataset_ = ds
        if self.weighting == "projected":
            ds.check_identified()
            probit = fit_probit(ds)
            self.weights_ = compute_weights(ds, probit, fit_power_series(ds, self.degree))
        else:
            self.weights_ = unit_weights(ds.n)
        self.profile_ = fit_profile(ds, self.weights_, grid, self._config())
        if self.profile_.errors:
            raise EstimationError(f"estimation failed at some levels: {self.profile_.errors}")
        self.coef_quantile_ = np.vstack([f.theta1 for f in self.profile_.fits])
        self.coef_cte_ = np.vstack([f.theta2 for f in self.profile_.fits])
        self.qte_ = self.coef_quantile_[:, 0].copy()
        self.ctate_ = self.coef_cte_[:, 0].copy()
        self.n_features_in_ = ds.p
        return self

    def predict(self, X, treatment, kind="cte"):
        """Fitted complier conditional CTE (or quantile), shape (n, len(quantiles))."""
        check_is_fitted(self, "profile_")
        ds = as_dataset(X, np.zeros(len(treatment)), treatment)
        if ds.p != self.n_features_in_:
            raise ValueError(f"X has {ds.p} features, expected {self.n_features_in_}")
        W = design_matrix(ds)
        coef = self.coef_cte_ if kind == "cte" else self.coef_quantile_
        if kind not in ("cte", "quantile"):
            raise ValueError("kind must be 'cte' or 'quantile'")
        return W @ coef.T

    def iqate(self, tau_lo, tau_hi) -> float:
        check_is_fitted(self, "profile_")
        return iqate(self.profile_, tau_lo, tau_hi)
