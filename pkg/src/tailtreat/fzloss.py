"""FZ loss family for joint (quantile, tail-expectation) elicitation.

The production estimator uses the softplus member (G1 = 0, G2 = eta =
softplus). The general form is kept for checking consistency properties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "softplus",
    "sigmoid",
    "sigmoid_prime",
    "lq",
    "FZComponents",
    "softplus_components",
    "fz_general",
    "fz_sp",
    "fz_sp_gradient",
    "fz_sp_gradient_matrix",
    "empirical_objective",
]

_BRANCH = 30.0


def softplus(t):
    """ln(1 + exp(t)), overflow safe."""
    t = np.asarray(t, dtype=float)
    out = np.log1p(np.exp(np.minimum(t, _BRANCH)))
    big = t > _BRANCH
    if np.any(big):
        out = np.where(big, t + np.log1p(np.exp(-np.where(big, t, 0.0))), out)
    return out if out.ndim else float(out)


def sigmoid(t):
    """Logistic function, the derivative of softplus."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid_prime(t):
    """Second derivative of softplus, s(t)(1 - s(t))."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-np.abs(t))
    out = e / (1.0 + e) ** 2
    return out if out.ndim else float(out)


def _check_tau(tau) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return tau


def lq(q, y, tau):
    """tau^-1 max(q - y, 0) - q."""
    tau = _check_tau(tau)
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.maximum(q - y, 0.0) / tau - q
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FZComponents:
    """The free functions of a general FZ loss.

    ``g1`` increasing; ``g2`` increasing and convex with derivatives
    ``g2_prime`` and ``g2_second``; ``eta`` any integrable function.
    """

    g1: Callable
    g1_prime: Callable
    g2: Callable
    g2_prime: Callable
    g2_second: Callable
    eta: Callable

    def check(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(np.asarray(self.g2_prime(t)) <= 0) or np.any(np.asarray(self.g2_second(t)) <= 0):
            raise ValueError("G2 must be strictly increasing and strictly convex at evaluated points")
        if np.any(np.asarray(self.g1_prime(t)) < 0):
            raise ValueError("G1 must be nondecreasing at evaluated points")


def _zero(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def softplus_components() -> FZComponents:
    return FZComponents(g1=_zero, g1_prime=_zero, g2=softplus, g2_prime=sigmoid,
                        g2_second=sigmoid_prime, eta=softplus)


def fz_general(q, e, y, tau, c: FZComponents):
    """General FZ loss; the indicator uses the closed inequality y <= q."""
    tau = _check_tau(tau)
    q, e, y = (np.asarray(a, dtype=float) for a in (q, e, y))
    ind = (y <= q).astype(float)
    out = (ind * (c.g1(q) - c.g1(y)) - tau * c.g1(q)
           + c.g2_prime(e) * (e + lq(q, y, tau)) - c.g2(e) + c.eta(y))
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite FZ loss value")
    return out if out.ndim else float(out)


def fz_sp(q, e, y, tau):
    """Softplus FZ loss, nonnegative and defined on all of R^3."""
    tau = _check_tau(tau)
    e = np.asarray(e, dtype=float)
    out = sigmoid(e) * (e + lq(q, y, tau)) - softplus(e) + softplus(y)
    return out if np.ndim(out) else float(out)


def fz_sp_gradient_matrix(theta1, theta2, W, y, tau) -> np.ndarray:
    """Per-observation gradients with respect to (theta1, theta2), shape (n, 2k).

    Block 1 is tau^-1 (1{y <= q} - tau) G'(e) w and block 2 is
    G''(e) (e + LQ(q, y)) w, the derivative wherever it exists.
    """
    tau = _check_tau(tau)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    theta1 = np.asarray(theta1, dtype=float).reshape(-1)
    theta2 = np.asarray(theta2, dtype=float).reshape(-1)
    if not (W.shape[1] == theta1.size == theta2.size):
        raise ValueError(f"dimension mismatch: w has {W.shape[1]} columns, "
                         f"theta1 {theta1.size}, theta2 {theta2.size}")
    y = np.asarray(y, dtype=float).reshape(-1)
    q = W @ theta1
    e = W @ theta2
    g1 = ((y <= q).astype(float) - tau) / tau * sigmoid(e)
    g2 = sigmoid_prime(e) * (e + lq(q, y, tau))
    return np.hstack([g1[:, None] * W, g2[:, None] * W])


def fz_sp_gradient(theta1, theta2, w, y, tau) -> np.ndarray:
    """Gradient of fz_sp(w'theta1, w'theta2, y, tau) for a single observation."""
    w = np.asarray(w, dtype=float).reshape(1, -1)
    return fz_sp_gradient_matrix(theta1, theta2, w, np.atleast_1d(y), tau)[0]


def empirical_objective(ds, weights, theta1, theta2, tau, W: np.ndarray | None = None) -> float:
    """Weighted mean softplus FZ loss n^-1 sum_i K_i fz_sp(q_i, e_i, y_i).

    ``ds`` is a Dataset (regressors built with the treatment column) unless
    ``W`` is given explicitly, in which case ``ds`` may be the outcome vector.
    """
    from .dataset import design_matrix

    weights = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("weights must lie in [0, 1]")
    if W is None:
        y = ds.y
        W = design_matrix(ds)
    else:
        y = np.asarray(getattr(ds, "y", ds), dtype=float)
    q = W @ np.asarray(theta1, dtype=float)
    e = W @ np.asarray(theta2, dtype=float)
    return float(np.mean(weights * fz_sp(q, e, y, tau)))
