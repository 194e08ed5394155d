"""Model fitting: constrained maximisation, sandwich covariance and Wald intervals."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, ndtri

from . import numdiff
from .data import Dataset, logit
from .likelihood import (
    LOWER,
    N_PARAMS,
    PARAM_NAMES,
    UPPER,
    Criterion,
    Mode,
    Prepared,
    Theta,
    objective,
    objective_terms,
    per_study_score,
    prepare,
)

log = logging.getLogger(__name__)

Status = Literal["converged", "max-iter", "line-search-failure"]

# multistart perturbations: (beta factor, tau^2 factor)
_JITTER = [(1.1, 0.5), (0.9, 2.0), (1.1, 2.0), (0.9, 0.5)]
J_SINGULAR_RTOL = 1e-10


class FitError(ValueError):
    """Precondition breach or an objective that cannot be evaluated anywhere."""


@dataclass(frozen=True)
class FitConfig:
    method: Mode = "pseudo"
    criterion: Criterion = "reml"
    max_iter: int = 500
    ftol: float = 1e-8
    xtol: float = 1e-6
    multistart: int = 5
    boundary_eps: float = 1e-4
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.method not in ("pseudo", "riley"):
            raise ValueError(f"method must be 'pseudo' or 'riley', got {self.method!r}")
        if self.criterion not in ("ml", "reml"):
            raise ValueError(f"criterion must be 'ml' or 'reml', got {self.criterion!r}")
        if not (self.ftol > 0 and self.xtol > 0 and self.boundary_eps > 0):
            raise ValueError("tolerances must be positive")
        if self.multistart < 1 or self.max_iter < 1:
            raise ValueError("multistart and max_iter must be >= 1")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    @property
    def label(self) -> str:
        return f"{self.method}-{self.criterion}"


@dataclass
class FitResult:
    theta: Theta
    cov: np.ndarray
    objective: float
    converged: bool
    status: str
    iterations: int
    method: str
    criterion: str
    level: float
    boundary_flags: dict[str, bool]
    j_singular: bool = False
    n_studies: int = 0
    thresholds: tuple[float, ...] = ()
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def beta(self) -> np.ndarray:
        return self.theta.beta

    @property
    def cov_beta(self) -> np.ndarray:
        return self.cov[:4, :4]

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "se": dict(zip(PARAM_NAMES, map(float, self.se))),
            "cov": self.cov.tolist(),
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "boundary_flags": dict(self.boundary_flags),
            "j_singular": self.j_singular,
            "objective": self.objective,
            "method": self.method,
            "criterion": self.criterion,
            "level": self.level,
            "ci": {k: list(v) for k, v in self.ci.items()},
            "n_studies": self.n_studies,
            "thresholds": list(self.thresholds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        theta = Theta(**{k: float(d["theta"][k]) for k in PARAM_NAMES})
        return cls(
            theta=theta,
            cov=np.asarray(d["cov"], dtype=float),
            objective=float(d["objective"]),
            converged=bool(d["converged"]),
            status=d.get("status", "converged" if d["converged"] else "max-iter"),
            iterations=int(d.get("iterations", 0)),
            method=d["method"],
            criterion=d["criterion"],
            level=float(d.get("level", 0.95)),
            boundary_flags=dict(d["boundary_flags"]),
            j_singular=bool(d.get("j_singular", False)),
            n_studies=int(d.get("n_studies", 0)),
            thresholds=tuple(d.get("thresholds", ())),
            ci={k: tuple(v) for k, v in d.get("ci", {}).items()},
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def wald_ci(estimate: float, se: float, level: float = 0.95,
            transform: Literal["identity", "logit"] = "identity") -> tuple[float, float]:
    """Wald interval; with ``logit`` the interval is built on the logit scale
    using the delta-method SE se / (p (1 - p)) and mapped back."""
    if se < 0:
        raise ValueError("standard error must be non-negative")
    z = normal_quantile(0.5 * (1.0 + level))
    if transform == "identity":
        half = z * se
        return estimate - half, estimate + half
    if transform == "logit":
        if not 0 < estimate < 1:
            raise ValueError("logit transform needs an estimate in (0, 1)")
        centre = float(logit(estimate))
        half = z * se / (estimate * (1.0 - estimate))
        lo, hi = expit(centre - half), expit(centre + half)
        return float(min(lo, hi)), float(max(lo, hi))
    raise ValueError(f"unknown transform {transform!r}")


@dataclass(frozen=True)
class OptimizeResult:
    x: np.ndarray
    value: float
    status: Status
    iterations: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _projected_gradient(x, g, lower, upper):
    pg = g.copy()
    at_lo = (x <= lower) & (g < 0)
    at_hi = (x >= upper) & (g > 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def optimize(objective_fn: Callable[[np.ndarray], np.ndarray], start,
             config: FitConfig | None = None, lower=None, upper=None) -> OptimizeResult:
    """Maximise a batched objective under box constraints with L-BFGS-B.

    ``objective_fn`` maps an (P, n) array of points to (P,) values; non-finite
    values are treated as -inf and pushed back by the line search. Gradients
    are central differences.
    """
    config = config or FitConfig()
    x0 = np.asarray(start, dtype=float)
    n = x0.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x0 = np.clip(x0, lower, upper)
    f_start = float(objective_fn(x0[None])[0])
    if not math.isfinite(f_start):
        raise FitError("objective is not finite at the starting point")

    def neg(x):
        val = float(objective_fn(x[None])[0])
        if not math.isfinite(val):
            return math.inf, np.zeros(n)
        try:
            g = numdiff.gradient(objective_fn, x, lower, upper)
        except numdiff.FiniteDifferenceError:
            return math.inf, np.zeros(n)
        return -val, -g

    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in zip(lower, upper)]
    res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": config.max_iter, "ftol": config.ftol,
                            "gtol": 1e-7, "maxcor": 20})
    x = np.clip(res.x, lower, upper)
    value = float(objective_fn(x[None])[0])
    if not math.isfinite(value) or value < f_start:
        x, value = x0, f_start
    if res.status == 0:
        status: Status = "converged"
    elif res.status == 1:
        status = "max-iter"
    else:
        # Line-search breakdowns at a stationary point are common with
        # finite-difference gradients; accept them if the projected gradient
        # is negligible relative to the curvature scale of the problem.
        try:
            g = numdiff.gradient(objective_fn, x, lower, upper)
            pg = _projected_gradient(x, g, lower, upper)
            small = np.max(np.abs(pg) * np.maximum(1.0, np.abs(x))) <= 1e-4 * max(1.0, abs(value))
        except numdiff.FiniteDifferenceError:
            small = False
        status = "converged" if small else "line-search-failure"
    return OptimizeResult(x, value, status, int(res.nit))


def initial_values(data: Dataset, n_starts: int = 1) -> list[np.ndarray]:
    """Pooled-OLS regression start plus deterministic multistart perturbations."""
    x = np.concatenate([s.thresholds for s in data.studies])
    y1 = np.concatenate([s.y1 for s in data.studies])
    y0 = np.concatenate([s.y0 for s in data.studies])
    X = np.column_stack([np.ones_like(x), x])
    (a1, g1), *_ = np.linalg.lstsq(X, y1, rcond=None)
    (a0, g0), *_ = np.linalg.lstsq(X, y0, rcond=None)
    g1, g0 = min(g1, 0.0), max(g0, 0.0)
    r1 = np.array([np.mean(s.y1 - g1 * s.thresholds) for s in data.studies]) - a1
    r0 = np.array([np.mean(s.y0 - g0 * s.thresholds) for s in data.studies]) - a0
    t1 = max(0.5 * np.var(r1, ddof=1), 1e-3) if len(r1) > 1 else 1e-3
    t0 = max(0.5 * np.var(r0, ddof=1), 1e-3) if len(r0) > 1 else 1e-3
    base = np.array([a1, a0, g1, g0, t1, t0, 0.0])
    starts = [base]
    for i in range(1, n_starts):
        bf, tf = _JITTER[(i - 1) % len(_JITTER)]
        spread = 1 + (i - 1) // len(_JITTER)
        bf = 1 + (bf - 1) * spread
        tf = tf ** spread
        s = base.copy()
        s[:4] *= bf
        s[4:6] *= tf
        starts.append(s)
    return [np.clip(s, LOWER, UPPER) for s in starts]


def sandwich_cov(theta_hat, data, mode: Mode = "pseudo",
                 criterion: Criterion = "ml") -> tuple[np.ndarray, bool]:
    """Robust covariance K^-1 J^-1 I J^-1 and whether J was numerically singular.

    J averages the per-study Hessians (the Hessian of the total divided by
    K) and I averages outer products of the per-study scores.
    """
    p = data if isinstance(data, Prepared) else prepare(data, mode)
    x = theta_hat.as_array() if isinstance(theta_hat, Theta) else np.asarray(theta_hat, float)
    k = p.n_studies
    scores = per_study_score(x, p, criterion=criterion)
    H = numdiff.hessian(lambda t: objective(t, p, criterion=criterion), x, LOWER, UPPER)
    J = H / k
    I = scores.T @ scores / k
    sv = np.linalg.svd(J, compute_uv=False)
    singular = (not np.all(np.isfinite(sv))) or sv.min() <= J_SINGULAR_RTOL * sv.max()
    Jinv = np.linalg.pinv(J) if singular else np.linalg.inv(J)
    cov = Jinv @ I @ Jinv / k
    return 0.5 * (cov + cov.T), bool(singular)


def boundary_flags(theta: Theta, eps: float) -> dict[str, bool]:
    return {
        "tau1_sq": theta.tau1_sq < eps,
        "tau0_sq": theta.tau0_sq < eps,
        "rho": abs(theta.rho) > 1.0 - eps,
    }


def fit(data: Dataset, config: FitConfig | None = None) -> FitResult:
    """Fit the model by (restricted) maximum (pseudo-)likelihood.

    Never raises for non-convergence; read ``converged`` and use
    :func:`classify_failure`.
    """
    config = config or FitConfig()
    if data.n_studies < 2:
        raise FitError(f"need at least 2 studies, got {data.n_studies}")
    if len(data.registry) < 2:
        raise FitError("need at least 2 distinct threshold values (slopes are unidentified)")
    p = prepare(data, config.method)
    if not p.all_valid:
        bad = [s.study_id for s, ok in zip(data.studies, p.valid) if not ok]
        raise FitError(f"within-study covariance not positive definite for studies {bad}")

    def f(t):
        return objective(t, p, criterion=config.criterion)

    best = None
    for start in initial_values(data, config.multistart):
        if not np.isfinite(f(start[None])[0]):
            continue
        res = optimize(f, start, config, LOWER, UPPER)
        if best is None or res.value > best.value:
            best = res
    if best is None:
        raise FitError("objective cannot be evaluated at any starting point")

    theta = Theta.from_array(best.x)
    try:
        cov, singular = sandwich_cov(best.x, p, criterion=config.criterion)
    except numdiff.FiniteDifferenceError:
        cov, singular = np.full((N_PARAMS, N_PARAMS), np.nan), True
    result = FitResult(
        theta=theta,
        cov=cov,
        objective=best.value,
        converged=best.converged,
        status=best.status,
        iterations=best.iterations,
        method=config.method,
        criterion=config.criterion,
        level=config.level,
        boundary_flags=boundary_flags(theta, config.boundary_eps),
        j_singular=singular,
        n_studies=data.n_studies,
        thresholds=data.registry,
    )
    se = result.se
    result.ci = {name: wald_ci(v, s if np.isfinite(s) else np.inf, config.level)
                 for name, v, s in zip(PARAM_NAMES, theta.as_array(), se)}
    return result


def classify_failure(result: FitResult, config: FitConfig | None = None) -> bool:
    eps = (config or FitConfig()).boundary_eps
    t = result.theta
    return (
        not result.converged
        or min(t.tau1_sq, t.tau0_sq) < eps
        or abs(t.rho) > 1.0 - eps
        or result.j_singular
    )


def z_pvalue(estimate: float, se: float) -> float:
    """Two-sided Wald p-value."""
    from scipy.special import ndtr

    if not se > 0:
        return float("nan")
    return float(2.0 * ndtr(-abs(estimate / se)))
