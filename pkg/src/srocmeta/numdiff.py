"""Bound-aware finite differences for functions evaluated on stacks of points.

Every function here takes ``f`` mapping an (P, n) array of points to an
(P, ...) array and evaluates the whole stencil in one call.
"""

from __future__ import annotations

import numpy as np

GRAD_STEP = 1e-5
HESS_STEP = 1e-4
MAX_HALVINGS = 8


class FiniteDifferenceError(ArithmeticError):
    pass


def _steps(x: np.ndarray, rel: float) -> np.ndarray:
    return np.maximum(rel, rel * np.abs(x))


def jacobian(f, x, lower=None, upper=None, rel_step: float = GRAD_STEP) -> np.ndarray:
    """Derivative of a vector-valued ``f`` at ``x``; result has shape out_shape + (n,).

    Central differences where the two-sided stencil fits inside the bounds,
    second-order one-sided differences otherwise. Coordinates whose stencil
    hits a non-finite value are retried with a halved step.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    h = _steps(x, rel_step)
    f0 = np.asarray(f(x[None]))[0]
    out = np.empty(f0.shape + (n,))
    todo = list(range(n))
    for _ in range(MAX_HALVINGS + 1):
        pts, plan = [], []
        for i in todo:
            e = np.zeros(n)
            e[i] = h[i]
            if x[i] - h[i] >= lower[i] and x[i] + h[i] <= upper[i]:
                plan.append((i, "central", len(pts)))
                pts += [x + e, x - e]
            elif x[i] + 2 * h[i] <= upper[i]:
                plan.append((i, "forward", len(pts)))
                pts += [x + e, x + 2 * e]
            else:
                plan.append((i, "backward", len(pts)))
                pts += [x - e, x - 2 * e]
        vals = np.asarray(f(np.array(pts)))
        retry = []
        for i, kind, at in plan:
            a, b = vals[at], vals[at + 1]
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(f0))):
                retry.append(i)
                continue
            if kind == "central":
                out[..., i] = (a - b) / (2 * h[i])
            elif kind == "forward":
                out[..., i] = (-3 * f0 + 4 * a - b) / (2 * h[i])
            else:
                out[..., i] = (3 * f0 - 4 * a + b) / (2 * h[i])
        if not retry:
            return out
        todo = retry
        h[retry] /= 2
    raise FiniteDifferenceError(f"non-finite objective near x for coordinates {todo}")


def gradient(f, x, lower=None, upper=None, rel_step: float = GRAD_STEP) -> np.ndarray:
    return jacobian(f, x, lower, upper, rel_step)


def hessian(f, x, lower=None, upper=None, rel_step: float = HESS_STEP) -> np.ndarray:
    """Symmetric central second-difference Hessian of a scalar ``f``.

    Near a bound the stencil centre is shifted inward so that every point is
    feasible; the result then approximates the Hessian at the shifted centre.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    h = _steps(x, rel_step)
    c = np.clip(x, lower + h, upper - h)
    # a coordinate squeezed between close bounds keeps its value
    c = np.where(lower + h > upper - h, x, c)
    eye = np.diag(h)
    pts = [c]
    for i in range(n):
        pts += [c + eye[i], c - eye[i]]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        pts += [c + eye[i] + eye[j], c + eye[i] - eye[j], c - eye[i] + eye[j], c - eye[i] - eye[j]]
    vals = np.asarray(f(np.array(pts)), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FiniteDifferenceError("non-finite objective inside the Hessian stencil")
    f0 = vals[0]
    H = np.empty((n, n))
    for i in range(n):
        H[i, i] = (vals[1 + 2 * i] - 2 * f0 + vals[2 + 2 * i]) / h[i] ** 2
    base = 1 + 2 * n
    for k, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = vals[base + 4 * k: base + 4 * k + 4]
        H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * h[i] * h[j])
    return 0.5 * (H + H.T)
