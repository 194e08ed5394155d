import numpy as np
import pytest

from srocmeta.numdiff import FiniteDifferenceError, gradient, hessian, jacobian


def quad(x):
    x = np.atleast_2d(x)
    return x[:, 0] ** 2 * x[:, 1] + np.exp(x[:, 1])


def test_gradient_central():
    x = np.array([1.5, 0.3])
    np.testing.assert_allclose(gradient(quad, x), [2 * 1.5 * 0.3, 1.5**2 + np.exp(0.3)], rtol=1e-8)


def test_gradient_at_bounds_is_one_sided():
    x = np.array([1.5, 0.0])
    calls = []

    def f(p):
        calls.append(p.copy())
        return quad(p)

    g = gradient(f, x, lower=[-np.inf, 0.0], upper=[np.inf, np.inf])
    assert all(np.all(c[:, 1] >= 0) for c in calls)
    np.testing.assert_allclose(g, [0.0, 1.5**2 + 1.0], atol=1e-8)


def test_jacobian_vector_output():
    f = lambda p: np.stack([p[:, 0] * p[:, 1], p[:, 0] + p[:, 1] ** 3], axis=1)
    j = jacobian(f, np.array([2.0, 3.0]))
    np.testing.assert_allclose(j, [[3, 2], [1, 27]], rtol=1e-7)


def test_hessian():
    x = np.array([1.5, 0.3])
    H = hessian(quad, x)
    np.testing.assert_allclose(H, [[2 * 0.3, 2 * 1.5], [2 * 1.5, np.exp(0.3)]], rtol=1e-6)
    H2 = hessian(quad, np.array([1.5, 0.0]), lower=[-np.inf, 0.0])
    np.testing.assert_allclose(H2, H2.T)


def test_step_halving_and_failure():
    f = lambda p: np.where(p[:, 0] > 1.0 + 1e-6, np.inf, p[:, 0] ** 2)
    g = gradient(f, np.array([1.0]))
    assert g[0] == pytest.approx(2.0, rel=1e-4)
    with pytest.raises(FiniteDifferenceError):
        gradient(lambda p: np.full(len(p), np.nan), np.array([1.0]))
