"""Simulation design with latent complier types and the M1-M4 comparison study.

Design: X1, X2 ~ U(0, 1); Z | X ~ Bern(Phi(-1 + X1 + X2)); (eps, v) bivariate
normal with unit variances and correlation rho; D1 = 1{v > -0.67},
D0 = 1{v > 0.67}; Y1 = (b0 + b1 + b2 X1 + b3 X2) eps, Y0 = (b1 + b2 X1 + b3 X2) eps.
Complier QTE and CTATE equal b0 times the quantile and tail mean of eps
among compliers.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, optimize
from scipy.stats import norm

from . import __version__
from ._rng import stream, stream_id
from ._validation import check_grid
from .dataset import Dataset
from .estimator import FitConfig, fit_profile
from .exceptions import EstimationError, InferenceError
from .inference import sandwich_covariance
from .nuisance import compute_weights, fit_power_series, fit_probit, oracle_weights_m2, unit_weights

__all__ = [
    "DGPConfig",
    "SimulatedDataset",
    "generate",
    "oracle_params",
    "oracle_params_mc",
    "StudyConfig",
    "StudyReport",
    "method_weights",
    "run_study",
    "export_report",
    "METHODS",
]

METHODS = ("M1", "M2", "M3", "M4")
TYPE_ALWAYS, TYPE_COMPLIER, TYPE_NEVER = "a", "c", "ne"


@dataclass(frozen=True)
class DGPConfig:
    n: int = 500
    rho: float = 0.0
    b: tuple[float, float, float, float] = (1.0, 0.0, 1.0, 1.0)
    thresholds: tuple[float, float] = (-0.67, 0.67)
    seed: int = 0

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    data: Dataset
    d0: np.ndarray
    d1: np.ndarray
    types: np.ndarray
    eps: np.ndarray
    vartheta: np.ndarray

    @property
    def complier(self) -> np.ndarray:
        return self.types == TYPE_COMPLIER


def generate(config: DGPConfig, rng: np.random.Generator | None = None) -> SimulatedDataset:
    """Draw one sample. Without ``rng`` the stream is keyed by ``config.seed``."""
    rng = stream(config.seed) if rng is None else rng
    n, rho = config.n, config.rho
    b0, b1, b2, b3 = config.b
    lo, hi = config.thresholds
    x = rng.uniform(size=(n, 2))
    z = (rng.uniform(size=n) < norm.cdf(-1.0 + x[:, 0] + x[:, 1])).astype(np.int8)
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    ev = rng.standard_normal(size=(n, 2)) @ chol.T
    eps, vt = ev[:, 0], ev[:, 1]
    d1 = (vt > lo).astype(np.int8)
    d0 = (vt > hi).astype(np.int8)
    d = z * d1 + (1 - z) * d0
    scale0 = b1 + b2 * x[:, 0] + b3 * x[:, 1]
    y1 = (b0 + scale0) * eps
    y0 = scale0 * eps
    y = np.where(d == 1, y1, y0)
    types = np.where(d1 == d0, np.where(d1 == 1, TYPE_ALWAYS, TYPE_NEVER), TYPE_COMPLIER)
    return SimulatedDataset(Dataset(y, d, z, x, ("x1", "x2")), d0, d1, types, eps, vt)


def _complier_density_factory(rho, thresholds):
    lo, hi = thresholds
    s = math.sqrt(1.0 - rho * rho)
    pc = norm.cdf(hi) - norm.cdf(lo)

    def f(e):
        return norm.pdf(e) * (norm.cdf((hi - rho * e) / s) - norm.cdf((lo - rho * e) / s)) / pc

    return f


@lru_cache(maxsize=256)
def _oracle_eps(rho: float, tau: float, thresholds: tuple[float, float]) -> tuple[float, float]:
    f = _complier_density_factory(rho, thresholds)
    opts = dict(epsabs=1e-13, epsrel=1e-12, limit=200)

    def cdf(q):
        return integrate.quad(f, -np.inf, q, **opts)[0]

    q = optimize.brentq(lambda t: cdf(t) - tau, -12.0, 12.0, xtol=1e-13)
    tail, err = integrate.quad(lambda e: e * f(e), -np.inf, q, **opts)
    if not np.isfinite(tail) or err > 1e-8:
        raise ArithmeticError("tail integral did not converge")
    return q, tail / tau


def oracle_params(rho: float, b=(1.0, 0.0, 1.0, 1.0), tau: float = 0.5,
                  thresholds=(-0.67, 0.67)) -> tuple[float, float]:
    """True (QTE, CTATE) at ``tau`` by numerical integration of the complier density."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    q, cte = _oracle_eps(float(rho), float(tau), tuple(float(t) for t in thresholds))
    return b[0] * q, b[0] * cte


def oracle_params_mc(rho: float, b=(1.0, 0.0, 1.0, 1.0), taus=(0.5,), draws: int = 10_000_000,
                     seed: int = 20240101, thresholds=(-0.67, 0.67), chunk: int = 1_000_000):
    """Monte Carlo counterpart of :func:`oracle_params` from simulated complier errors."""
    rng = stream(seed, 999)
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    lo, hi = thresholds
    kept = []
    left = draws
    while left > 0:
        m = min(chunk, left)
        ev = rng.standard_normal(size=(m, 2)) @ chol.T
        kept.append(ev[(ev[:, 1] > lo) & (ev[:, 1] <= hi), 0])
        left -= m
    e = np.sort(np.concatenate(kept))
    csum = np.cumsum(e)
    out = {}
    for tau in taus:
        q = float(np.quantile(e, tau))
        m = int(np.searchsorted(e, q, side="right"))
        out[float(tau)] = (b[0] * q, b[0] * csum[m - 1] / m)
    return out


@dataclass(frozen=True)
class StudyConfig:
    n: int = 500
    rho: float = 0.0
    R: int = 200
    grid: tuple[float, ...] = tuple(np.round(np.arange(1, 10) / 10, 10))
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    degrees: dict = field(default_factory=lambda: {"M1": 2, "M2": 2})
    b: tuple[float, float, float, float] = (1.0, 0.0, 1.0, 1.0)
    threads: int = 1
    inference: bool = False
    level: float = 0.95


@dataclass(eq=False)
class StudyReport:
    """Bias, variance and MSE per (method, tau, target) over replications.

    ``estimates[method]`` has shape (R, len(grid), 2) with targets
    (QTE, CTATE) in the last axis; failed replications are NaN.
    """

    config: StudyConfig
    truth: np.ndarray
    estimates: dict
    failures: dict
    covered: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    TARGETS = ("QTE", "CTATE")

    def _ok(self, m):
        return ~np.isnan(self.estimates[m])

    def bias(self, m) -> np.ndarray:
        return np.nanmean(self.estimates[m], axis=0) - self.truth

    def variance(self, m) -> np.ndarray:
        return np.nanvar(self.estimates[m], axis=0)

    def mse(self, m) -> np.ndarray:
        return np.nanmean((self.estimates[m] - self.truth) ** 2, axis=0)

    def coverage(self, m) -> np.ndarray | None:
        c = self.covered.get(m)
        return None if c is None else np.nanmean(c, axis=0)

    def flagged(self, m, max_fail: float = 0.10) -> np.ndarray:
        return np.mean(~self._ok(m), axis=0) > max_fail

    def rows(self):
        grid = self.config.grid
        for m in self.config.methods:
            b, v, s = self.bias(m), self.variance(m), self.mse(m)
            for j, tau in enumerate(grid):
                for t, target in enumerate(self.TARGETS):
                    yield {"method": m, "tau": float(tau), "target": target,
                           "bias": float(b[j, t]), "variance": float(v[j, t]), "mse": float(s[j, t])}

    def metadata(self) -> dict:
        cfg = asdict(self.config)
        cfg["grid"] = list(cfg["grid"])
        meta = {
            "version": __version__,
            "config": cfg,
            "truth": {"QTE": self.truth[:, 0].tolist(), "CTATE": self.truth[:, 1].tolist()},
            "failures": {m: int(v) for m, v in self.failures.items()},
            "flagged_cells": {m: self.flagged(m).tolist() for m in self.config.methods},
            "seeds": self.seeds,
        }
        if self.covered:
            meta["coverage"] = {m: self.coverage(m).tolist() for m in self.covered}
        return meta


def method_weights(method: str, sim: SimulatedDataset, degrees: dict | None = None):
    degrees = degrees or {}
    ds = sim.data
    if method == "M1":
        probit = fit_probit(ds)
        return compute_weights(ds, probit, fit_power_series(ds, degrees.get("M1", 2)))
    if method == "M2":
        return oracle_weights_m2(sim, fit_probit(ds), degrees.get("M2", 2))
    if method == "M3":
        return unit_weights(ds.n)
    if method == "M4":
        return unit_weights(ds.n, mask=sim.complier)
    raise ValueError(f"unknown method {method!r}")


def _replicate(args):
    cfg, r, truth = args
    sim = generate(DGPConfig(n=cfg.n, rho=cfg.rho, b=cfg.b), rng=stream(cfg.seed, r))
    out, cov = {}, {}
    z = norm.ppf(0.5 + cfg.level / 2)
    for m in cfg.methods:
        est = np.full((len(cfg.grid), 2), np.nan)
        hit = np.full((len(cfg.grid), 2), np.nan)
        try:
            w = method_weights(m, sim, cfg.degrees)
            prof = fit_profile(sim.data, w, cfg.grid, FitConfig())
        except EstimationError:
            out[m], cov[m] = est, hit
            continue
        for j, fit in enumerate(prof.fits):
            if fit is None:
                continue
            est[j] = fit.qte, fit.ctate
            if cfg.inference:
                try:
                    # the oracle M4 weights restrict to the complier subsample
                    c = sandwich_covariance(sim.data, w, w.probit, fit)
                    k = fit.theta1.size
                    se = np.sqrt(np.diag(c.cov)[[0, k]])
                    hit[j] = np.abs(est[j] - truth[j]) <= z * se
                except (InferenceError, EstimationError):
                    pass
        out[m], cov[m] = est, hit
    return r, out, cov


def run_study(config: StudyConfig) -> StudyReport:
    """Monte Carlo comparison of the four weighting schemes.

    Replication ``r`` draws from the stream ``(seed, r)``; results are
    assembled in replication order, so output does not depend on ``threads``.
    """
    if config.R < 2:
        raise ValueError("R must be at least 2")
    grid = check_grid(config.grid)
    config = StudyConfig(**{**asdict(config), "grid": tuple(float(t) for t in grid)})
    for m in config.methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    truth = np.array([oracle_params(config.rho, config.b, t) for t in grid])
    tasks = [(config, r, truth) for r in range(config.R)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, config.R // (4 * config.threads))))
    else:
        results = [_replicate(t) for t in tasks]
    results.sort(key=lambda t: t[0])
    estimates = {m: np.stack([res[1][m] for res in results]) for m in config.methods}
    covered = ({m: np.stack([res[2][m] for res in results]) for m in config.methods}
               if config.inference else {})
    failures = {m: int(np.sum(np.isnan(estimates[m]).any(axis=(1, 2)))) for m in config.methods}
    return StudyReport(config=config, truth=truth, estimates=estimates, failures=failures,
                       covered=covered, seeds=[stream_id(config.seed, r) for r in range(config.R)])


def export_report(report: StudyReport, path, metadata_path=None) -> Path:
    """CSV with columns method, tau, target, bias, variance, mse; JSON metadata alongside."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "tau", "target", "bias", "variance", "mse"])
        w.writeheader()
        for row in report.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    meta_path = Path(metadata_path) if metadata_path else path.with_suffix(".json")
    meta_path.write_text(json.dumps(report.metadata(), indent=2))
    return path
