"""Weighted linear quantile regression by an exterior-point simplex.

The solver walks between vertices of the piecewise-linear objective, i.e.
coefficient vectors that interpolate ``k`` observations (the basis). At each
vertex the 2k edge directions are obtained by releasing one basis
observation above or below the fitted hyperplane. The steepest descending
edge is followed to the minimizing breakpoint, found as a weighted median of
the crossing points along the ray, as in Barrodale and Roberts. Termination
happens at a vertex with no descending edge, so the returned solution always
fits at least ``k`` observations exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DegenerateProblemError

__all__ = ["QRegProblem", "solve_wqr", "check_loss", "rho"]

WEIGHT_FLOOR = 1e-12


def rho(u, tau):
    """Check function u (tau - 1{u < 0})."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


@dataclass(frozen=True, eq=False)
class QRegProblem:
    """min_b n^-1 sum_i w_i rho_tau(y_i - x_i'b)."""

    design: np.ndarray
    response: np.ndarray
    weights: np.ndarray
    tau: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.response, dtype=float).reshape(-1)
        w = (np.ones_like(y) if self.weights is None
             else np.asarray(self.weights, dtype=float).reshape(-1))
        if X.shape[0] != y.shape[0] or w.shape[0] != y.shape[0]:
            raise ValueError("design, response and weights must have the same number of rows")
        if not 0.0 < float(self.tau) < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def k(self) -> int:
        return self.design.shape[1]


def check_loss(prob: QRegProblem, theta1) -> float:
    """Weighted mean check loss; the mean is over all rows, zero weights included."""
    r = prob.response - prob.design @ np.asarray(theta1, dtype=float)
    return float(np.mean(prob.weights * rho(r, prob.tau)))


def _independent_rows(X: np.ndarray, order: np.ndarray, k: int) -> np.ndarray | None:
    """First k rows in ``order`` that are linearly independent (greedy Gram-Schmidt)."""
    Q = np.zeros((k, X.shape[1]))
    chosen = []
    for i in order:
        x = X[i]
        nx = np.linalg.norm(x)
        if nx == 0:
            continue
        v = x - Q[: len(chosen)].T @ (Q[: len(chosen)] @ x)
        nv = np.linalg.norm(v)
        if nv > 1e-8 * nx:
            Q[len(chosen)] = v / nv
            chosen.append(i)
            if len(chosen) == k:
                return np.array(chosen)
    return None


def _start_basis(X, y, w, tau, start) -> np.ndarray:
    n, k = X.shape
    if start is None:
        sw = np.sqrt(w)
        b, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        r = y - X @ b
        order = np.argsort(r, kind="stable")
        cw = np.cumsum(w[order])
        shift = r[order][min(np.searchsorted(cw, tau * cw[-1]), n - 1)]
        r = r - shift
    else:
        r = y - X @ np.asarray(start, dtype=float)
    basis = _independent_rows(X, np.argsort(np.abs(r), kind="stable"), k)
    if basis is None:
        raise DegenerateProblemError("design is rank deficient on the positively weighted rows")
    return basis


def _lex_less(a, b, tol) -> bool:
    diff = np.flatnonzero(np.abs(a - b) > tol)
    return diff.size > 0 and a[diff[0]] < b[diff[0]]


def solve_wqr(prob: QRegProblem, start=None, max_iter: int | None = None) -> np.ndarray:
    """Vertex solution of the weighted quantile regression ``prob``.

    Parameters
    ----------
    prob : QRegProblem
    start : optional coefficient vector used to pick the starting basis
        (observations with the smallest residuals); warm starts after small
        weight changes typically need only a few pivots.
    max_iter : pivot cap, default ``10 n + 100``.

    Returns
    -------
    theta1 : (k,) ndarray. Among tied optimal vertices reachable along
        flat edges, the lexicographically smallest is returned.
    """
    keep = prob.weights >= WEIGHT_FLOOR
    if not keep.any():
        raise DegenerateProblemError("all weights are zero")
    X = prob.design[keep]
    y = prob.response[keep]
    w = prob.weights[keep]
    tau = prob.tau
    n, k = X.shape
    if n < k:
        raise DegenerateProblemError(f"only {n} positively weighted rows for {k} coefficients")
    if max_iter is None:
        max_iter = 10 * n + 100

    yscale = max(1.0, float(np.max(np.abs(y))))
    rtol = 1e-11 * yscale
    gtol = 1e-11 * float(w.sum()) * max(1.0, float(np.max(np.abs(X))))

    basis = _start_basis(X, y, w, tau, start)
    in_basis = np.zeros(n, dtype=bool)
    tie_phase = False
    for _ in range(max_iter):
        Xh = X[basis]
        try:
            Xinv = np.linalg.inv(Xh)
        except np.linalg.LinAlgError:
            raise DegenerateProblemError("singular basis encountered") from None
        b = Xinv @ y[basis]
        r = y - X @ b
        in_basis[:] = False
        in_basis[basis] = True
        r[in_basis] = 0.0
        zero = (np.abs(r) <= rtol) & ~in_basis
        U = X @ Xinv
        v = np.where(r > 0, -w * tau, w * (1.0 - tau))
        v[in_basis | zero] = 0.0
        gv = v @ U
        wb = w[basis]
        gp = gv + wb * (1.0 - tau)
        gm = -gv + wb * tau
        if zero.any():
            Uz = U[zero]
            wz = w[zero]
            pos, neg = np.maximum(Uz, 0.0), np.maximum(-Uz, 0.0)
            gp = gp + wz @ (tau * neg + (1.0 - tau) * pos)
            gm = gm + wz @ (tau * pos + (1.0 - tau) * neg)
        g = np.concatenate([gp, gm])

        if not tie_phase:
            jstar = int(np.argmin(g))
            if g[jstar] >= -gtol:
                tie_phase = True
        if tie_phase:
            # flat edges at an optimum lead to other optimal vertices
            moved = False
            for jstar in np.flatnonzero(np.abs(g) <= gtol):
                step = _ray_step(X, y, w, r, U, jstar, k, in_basis | zero, 0.0, first=True)
                if step is None:
                    continue
                entering, j = step
                trial = basis.copy()
                trial[j] = entering
                try:
                    bt = np.linalg.solve(X[trial], y[trial])
                except np.linalg.LinAlgError:
                    continue
                if _lex_less(bt, b, 1e-12 * max(1.0, float(np.max(np.abs(b))))):
                    basis = trial
                    moved = True
                    break
            if not moved:
                return b
            continue

        step = _ray_step(X, y, w, r, U, jstar, k, in_basis | zero, g[jstar], first=False)
        if step is None:
            raise DegenerateProblemError("objective unbounded along an edge; check the design")
        entering, j = step
        basis = basis.copy()
        basis[j] = entering
    raise ConvergenceError(f"quantile regression simplex exceeded {max_iter} pivots")


def _ray_step(X, y, w, r, U, jstar, k, frozen, g0, first):
    """Entering observation for the edge ``jstar`` (index into the 2k directions)."""
    j = jstar % k
    s = 1.0 if jstar < k else -1.0
    u = s * U[:, j]
    # residual along the ray is r - t u; breakpoints at t = r / u > 0
    cand = (~frozen) & (np.abs(u) > 1e-14) & (np.sign(r) == np.sign(u))
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return None
    t = r[idx] / u[idx]
    order = np.lexsort((idx, t))
    if first:
        return int(idx[order[0]]), j
    slope = g0 + np.cumsum((w[idx] * np.abs(u[idx]))[order])
    hit = np.flatnonzero(slope >= 0)
    if hit.size == 0:
        return None
    return int(idx[order[hit[0]]]), j
