import itertools

import numpy as np
import pytest

from tailtreat.exceptions import DegenerateProblemError
from tailtreat.qreg import QRegProblem, check_loss, rho, solve_wqr


def brute_force(prob):
    """Best vertex over all k-subsets of positively weighted observations."""
    X, y, w = prob.design, prob.response, prob.weights
    keep = np.flatnonzero(w > 1e-12)
    best = np.inf
    for rows in itertools.combinations(keep, prob.k):
        A = X[list(rows)]
        if abs(np.linalg.det(A)) < 1e-10:
            continue
        b = np.linalg.solve(A, y[list(rows)])
        best = min(best, check_loss(prob, b))
    return best


def one(n):
    return np.ones((n, 1))


def test_median_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert solve_wqr(QRegProblem(one(3), y, None, 0.5))[0] == pytest.approx(2.0)
    prob = QRegProblem(one(3), y, np.array([3.0, 1.0, 1.0]), 0.5)
    b = solve_wqr(prob)
    assert b[0] == pytest.approx(1.0)
    assert check_loss(prob, b) == pytest.approx(1.5 / 3)
    assert check_loss(prob, [2.0]) == pytest.approx(2.0 / 3)


def test_lexicographic_tie_break():
    # every q in [2, 3] is optimal; the smallest is returned
    b = solve_wqr(QRegProblem(one(4), np.array([1.0, 2.0, 3.0, 4.0]), None, 0.5))
    assert b[0] == pytest.approx(2.0)


def test_exact_interpolation(rng):
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = X @ np.array([1.5, -2.0])
    for tau in (0.1, 0.5, 0.9):
        b = solve_wqr(QRegProblem(X, y, rng.uniform(size=30), tau))
        np.testing.assert_allclose(b, [1.5, -2.0], atol=1e-10)


def test_check_loss_conventions():
    prob = QRegProblem(one(3), np.array([1.0, 2.0, 5.0]), np.zeros(3), 0.5)
    assert check_loss(prob, [0.0]) == 0
    prob = QRegProblem(one(3), np.array([1.0, 2.0, 5.0]), np.ones(3), 0.5)
    assert check_loss(prob, [2.0]) == pytest.approx(0.5 * np.mean(np.abs([1.0, 2.0, 5.0] - np.array(2.0))))


def test_degenerate_inputs():
    with pytest.raises(DegenerateProblemError):
        solve_wqr(QRegProblem(one(3), np.ones(3), np.zeros(3), 0.5))
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(DegenerateProblemError):
        solve_wqr(QRegProblem(X, np.arange(5.0), None, 0.5))
    with pytest.raises(ValueError):
        QRegProblem(one(2), np.ones(2), np.array([1.0, -1.0]), 0.5)


def test_brute_force_oracle(rng):
    for _ in range(150):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, 3))
        if n < k:
            continue
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
        y = rng.normal(size=n)
        w = rng.uniform(size=n) * (rng.uniform(size=n) > 0.2)
        if np.sum(w > 0) < k:
            w[:k] = 1.0
        prob = QRegProblem(X, y, w, float(rng.uniform(0.05, 0.95)))
        b = solve_wqr(prob)
        assert check_loss(prob, b) <= brute_force(prob) + 1e-8


def test_subgradient_optimality(rng):
    n, k = 200, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = X @ np.array([1.0, 0.5, -1.0]) + rng.standard_t(3, size=n)
    w = rng.uniform(size=n)
    for tau in (0.2, 0.5, 0.8):
        prob = QRegProblem(X, y, w, tau)
        b = solve_wqr(prob)
        f0 = check_loss(prob, b)
        h = 1e-7
        for j in range(k):
            for s in (1, -1):
                step = np.zeros(k)
                step[j] = s * h
                assert (check_loss(prob, b + step) - f0) / h >= -1e-7
        # vertex solution: at least k observations fitted exactly
        assert np.sum(np.abs(y - X @ b) < 1e-9) >= k


def test_scale_equivariance(rng):
    n = 60
    X = np.column_stack([np.ones(n), rng.uniform(size=n)])
    y = rng.normal(size=n)
    w = rng.uniform(size=n)
    b = solve_wqr(QRegProblem(X, y, w, 0.3))
    b2 = solve_wqr(QRegProblem(X, 2.5 * y, 4.0 * w, 0.3))
    np.testing.assert_allclose(b2, 2.5 * b, atol=1e-10)


def test_warm_start_same_solution(rng):
    n = 500
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = X @ np.array([0.0, 1.0, 2.0]) + rng.normal(size=n)
    prob = QRegProblem(X, y, rng.uniform(size=n), 0.35)
    cold = solve_wqr(prob)
    warm = solve_wqr(prob, start=cold + 0.3)
    assert check_loss(prob, warm) == pytest.approx(check_loss(prob, cold), abs=1e-12)


def test_tiny_weights_dropped():
    y = np.array([1.0, 2.0, 3.0, 100.0])
    w = np.array([1.0, 1.0, 1.0, 1e-14])
    assert solve_wqr(QRegProblem(one(4), y, w, 0.5))[0] == pytest.approx(2.0)


def test_rho():
    np.testing.assert_allclose(rho(np.array([-2.0, 0.0, 3.0]), 0.25), [1.5, 0.0, 0.75])
