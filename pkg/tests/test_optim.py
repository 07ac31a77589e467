import numpy as np
import pytest

from rgbdface.optim import levenberg_marquardt


def rosenbrock(x):
    r = np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
    J = np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
    return r, J


def test_rosenbrock_minimum():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0], max_iter=200)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)
    assert res.converged


def test_history_strictly_decreasing():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0], max_iter=200)
    h = np.array(res.history)
    assert np.all(np.diff(h) < 0)
    assert res.cost == h[-1]


def test_linear_least_squares_matches_lstsq(rng):
    A = rng.normal(size=(30, 4))
    b = rng.normal(size=30)
    res = levenberg_marquardt(lambda x: (A @ x - b, A), np.zeros(4))
    np.testing.assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)


def test_bounds_are_respected():
    # unconstrained minimum at x = 2, bound at 1
    res = levenberg_marquardt(lambda x: (x - 2.0, np.eye(1)), [0.0], lower=[0.0], upper=[1.0])
    assert res.x[0] == pytest.approx(1.0)


def test_start_is_clamped_into_box():
    res = levenberg_marquardt(lambda x: (x - 0.5, np.eye(2)), [5.0, -5.0], lower=0.0, upper=1.0)
    np.testing.assert_allclose(res.x, 0.5, atol=1e-10)


def test_zero_iterations_returns_start():
    res = levenberg_marquardt(rosenbrock, [0.3, 0.2], max_iter=0)
    np.testing.assert_array_equal(res.x, [0.3, 0.2])
    assert res.iterations == 0
