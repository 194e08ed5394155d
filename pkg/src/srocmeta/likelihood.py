"""Marginal normal likelihood of the multi-threshold random-intercept model.

For study k with m thresholds the stacked outcome

    y_k = (Y1_k1..Y1_km, Y0_k1..Y0_km)

is normal with mean Z_k β and covariance Σ_k = I_k G I_kᵀ + Ω_k, where
β = (α1, α0, γ1, γ0), G is the 2x2 between-study matrix of the random
intercepts and Ω_k the within-study covariance (diagonal for the pseudo
likelihood, the full multinomial matrix for the two-step comparator).

Ω_k does not depend on θ, so its Cholesky factor is computed once. Σ_k is
never formed: Woodbury's identity reduces every evaluation to 2x2 algebra
per study, and the functions below accept a stack of parameter vectors so
finite-difference stencils cost a single vectorised call.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Literal

import numpy as np

from .data import Dataset, LogitStudy
from .within import WithinCov, study_within_cov

Mode = Literal["pseudo", "riley"]
Criterion = Literal["ml", "reml"]

PARAM_NAMES = ("alpha1", "alpha0", "gamma1", "gamma0", "tau1_sq", "tau0_sq", "rho")
N_PARAMS = len(PARAM_NAMES)
RHO_BOUND = 1.0 - 1e-8
LOWER = np.array([-np.inf, -np.inf, -np.inf, 0.0, 0.0, 0.0, -RHO_BOUND])
UPPER = np.array([np.inf, np.inf, 0.0, np.inf, np.inf, np.inf, RHO_BOUND])
PIVOT_RTOL = 1e-12

MODE_STRUCTURE = {"pseudo": "diagonal", "riley": "full"}


class NotPositiveDefiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Theta:
    alpha1: float
    alpha0: float
    gamma1: float
    gamma0: float
    tau1_sq: float
    tau0_sq: float
    rho: float

    @classmethod
    def from_array(cls, values) -> "Theta":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {values.shape}")
        return cls(*map(float, values))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha0, self.gamma1, self.gamma0])

    def between_cov(self) -> np.ndarray:
        return between_cov(self.tau1_sq, self.tau0_sq, self.rho)

    def violations(self) -> list[str]:
        out = []
        if self.gamma1 > 0:
            out.append("gamma1 must be <= 0")
        if self.gamma0 < 0:
            out.append("gamma0 must be >= 0")
        if self.tau1_sq < 0 or self.tau0_sq < 0:
            out.append("between-study variances must be >= 0")
        if not -1 <= self.rho <= 1:
            out.append("rho must lie in [-1, 1]")
        return out

    def to_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(PARAM_NAMES, self.as_array())}


def between_cov(tau1_sq: float, tau0_sq: float, rho: float) -> np.ndarray:
    off = rho * np.sqrt(tau1_sq * tau0_sq)
    return np.array([[tau1_sq, off], [off, tau0_sq]])


def design_matrices(study: LogitStudy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Incidence matrix I_k (2m x 2), design Z_k (2m x 4) and outcome y_k."""
    m = study.m
    one = np.ones(m)
    zero = np.zeros(m)
    x = study.thresholds
    inc = np.column_stack([np.r_[one, zero], np.r_[zero, one]])
    z = np.column_stack([np.r_[one, zero], np.r_[zero, one], np.r_[x, zero], np.r_[zero, x]])
    y = np.r_[study.y1, study.y0]
    return inc, z, y


def marginal_cov(theta: Theta, w: WithinCov) -> np.ndarray:
    """Dense Σ_k = I_k G I_kᵀ + Ω_k."""
    m = w.m
    omega = w.block()
    if omega.shape != (2 * m, 2 * m):
        raise ValueError("within-study blocks have inconsistent sizes")
    g = theta.between_cov()
    inc = np.zeros((2 * m, 2))
    inc[:m, 0] = 1.0
    inc[m:, 1] = 1.0
    return inc @ g @ inc.T + omega


def _checked_cholesky(a: np.ndarray) -> np.ndarray | None:
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(low) ** 2 < PIVOT_RTOL * np.max(np.diag(a))):
        return None
    return low


def _whiten(low: np.ndarray, v: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    return solve_triangular(low, v, lower=True)


@dataclass
class Prepared:
    """Per-study quantities that stay fixed while θ varies.

    Arrays are padded to the largest study size; padded entries are zero and
    drop out of every inner product.
    """

    mode: str
    n_studies: int
    logdet_omega: np.ndarray  # (K,)
    wy1: np.ndarray  # (K, M) L1^-1 y1
    wo1: np.ndarray  # (K, M) L1^-1 1
    wx1: np.ndarray  # (K, M) L1^-1 x
    wy0: np.ndarray
    wo0: np.ndarray
    wx0: np.ndarray
    valid: np.ndarray  # (K,) bool, False where Ω_k is not positive definite

    def __post_init__(self) -> None:
        self.a1 = np.einsum("km,km->k", self.wo1, self.wo1)
        self.a0 = np.einsum("km,km->k", self.wo0, self.wo0)
        self.ox1 = np.einsum("km,km->k", self.wo1, self.wx1)
        self.ox0 = np.einsum("km,km->k", self.wo0, self.wx0)
        self.xx1 = np.einsum("km,km->k", self.wx1, self.wx1)
        self.xx0 = np.einsum("km,km->k", self.wx0, self.wx0)

    @property
    def all_valid(self) -> bool:
        return bool(self.valid.all())


def prepare(data: Dataset, mode: Mode = "pseudo",
            covs: list[WithinCov] | None = None) -> Prepared:
    """Factor each Ω_k and whiten y, 1 and x against it."""
    if mode not in MODE_STRUCTURE:
        raise ValueError(f"unknown mode {mode!r}")
    if covs is None:
        covs = [study_within_cov(s, MODE_STRUCTURE[mode]) for s in data.studies]
    k = data.n_studies
    mmax = max(s.m for s in data.studies)
    arrays = {name: np.zeros((k, mmax)) for name in ("wy1", "wo1", "wx1", "wy0", "wo0", "wx0")}
    logdet = np.zeros(k)
    valid = np.ones(k, dtype=bool)
    for i, (study, w) in enumerate(zip(data.studies, covs)):
        m = study.m
        if w.m != m:
            raise ValueError(f"study {study.study_id!r}: covariance size {w.m} != {m}")
        l1 = _checked_cholesky(w.omega1)
        l0 = _checked_cholesky(w.omega0)
        if l1 is None or l0 is None:
            valid[i] = False
            continue
        logdet[i] = 2.0 * (np.log(np.diag(l1)).sum() + np.log(np.diag(l0)).sum())
        one = np.ones(m)
        x = study.thresholds
        arrays["wy1"][i, :m] = _whiten(l1, study.y1)
        arrays["wo1"][i, :m] = _whiten(l1, one)
        arrays["wx1"][i, :m] = _whiten(l1, x)
        arrays["wy0"][i, :m] = _whiten(l0, study.y0)
        arrays["wo0"][i, :m] = _whiten(l0, one)
        arrays["wx0"][i, :m] = _whiten(l0, x)
    return Prepared(mode=mode, n_studies=k, logdet_omega=logdet, valid=valid, **arrays)


def _as_prepared(data, mode: Mode) -> Prepared:
    if isinstance(data, Prepared):
        return data
    return prepare(data, mode)


def _woodbury(thetas: np.ndarray, p: Prepared):
    """Per-study pieces shared by the ML and REML objectives.

    Returns (ml_terms, W11, W12, W22, ok) with shapes (P, K).
    """
    t = thetas
    a1, g1 = t[:, 0, None, None], t[:, 2, None, None]
    a0, g0 = t[:, 1, None, None], t[:, 3, None, None]
    s1 = p.wy1[None] - a1 * p.wo1[None] - g1 * p.wx1[None]
    s0 = p.wy0[None] - a0 * p.wo0[None] - g0 * p.wx0[None]
    q = np.einsum("pkm,pkm->pk", s1, s1) + np.einsum("pkm,pkm->pk", s0, s0)
    b1 = np.einsum("km,pkm->pk", p.wo1, s1)
    b0 = np.einsum("km,pkm->pk", p.wo0, s0)

    t11 = t[:, 4, None]
    t00 = t[:, 5, None]
    with np.errstate(invalid="ignore"):
        t10 = t[:, 6, None] * np.sqrt(t11 * t00)
    A1, A0 = p.a1[None], p.a0[None]
    det_m = (1.0 + A1 * t11) * (1.0 + A0 * t00) - A1 * A0 * t10 ** 2
    # Σ is PD iff A^-1 + G is PD (A = Iᵀ Ω^-1 I is diagonal and PD).
    with np.errstate(divide="ignore", invalid="ignore"):
        b11 = 1.0 / A1 + t11
        b22 = 1.0 / A0 + t00
        piv2 = det_m / (A1 * A0 * b11)
        scale = np.maximum(b11, b22)
        ok = (b11 > PIVOT_RTOL * scale) & (b22 > PIVOT_RTOL * scale) & (piv2 > PIVOT_RTOL * scale)
        ok &= p.valid[None] & np.isfinite(det_m)
        gdet = t11 * t00 - t10 ** 2
        w11 = (t11 + A0 * gdet) / det_m
        w12 = t10 / det_m
        w22 = (t00 + A1 * gdet) / det_m
        quad = q - (w11 * b1 ** 2 + 2.0 * w12 * b1 * b0 + w22 * b0 ** 2)
        terms = -0.5 * (p.logdet_omega[None] + np.log(det_m)) - 0.5 * quad
    terms = np.where(ok, terms, -np.inf)
    return terms, w11, w12, w22, ok


def _reml_logdet(p: Prepared, w11, w12, w22, ok) -> np.ndarray:
    """log|Σ_k Z_kᵀ Σ_k^-1 Z_k| per parameter row; -inf-safe (returns +inf if singular)."""
    n_rows = w11.shape[0]
    # Z_kᵀ Ω_k^-1 Z_k and C_k = I_kᵀ Ω_k^-1 Z_k in (α1, α0, γ1, γ0) order.
    zz = np.zeros((p.n_studies, 4, 4))
    zz[:, 0, 0], zz[:, 1, 1] = p.a1, p.a0
    zz[:, 0, 2] = zz[:, 2, 0] = p.ox1
    zz[:, 1, 3] = zz[:, 3, 1] = p.ox0
    zz[:, 2, 2], zz[:, 3, 3] = p.xx1, p.xx0
    c1 = np.zeros((p.n_studies, 4))
    c2 = np.zeros((p.n_studies, 4))
    c1[:, 0], c1[:, 2] = p.a1, p.ox1
    c2[:, 1], c2[:, 3] = p.a0, p.ox0
    o11 = np.einsum("ki,kj->kij", c1, c1)
    o22 = np.einsum("ki,kj->kij", c2, c2)
    o12 = np.einsum("ki,kj->kij", c1, c2)
    o12 = o12 + o12.transpose(0, 2, 1)
    w11 = np.where(ok, w11, 0.0)
    w12 = np.where(ok, w12, 0.0)
    w22 = np.where(ok, w22, 0.0)
    info = zz.sum(axis=0)[None] - (
        np.einsum("pk,kij->pij", w11, o11)
        + np.einsum("pk,kij->pij", w12, o12)
        + np.einsum("pk,kij->pij", w22, o22)
    )
    diag = np.einsum("pii->pi", info)
    try:
        lows = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        lows = None
    if lows is not None:
        piv = np.einsum("pii->pi", lows) ** 2
        good = np.all(piv >= PIVOT_RTOL * diag.max(axis=1, keepdims=True), axis=1)
        with np.errstate(divide="ignore"):
            logdet = 2.0 * np.log(np.einsum("pii->pi", lows)).sum(axis=1)
        return np.where(good, logdet, np.inf)
    out = np.full(n_rows, np.inf)
    for r in range(n_rows):
        low = _checked_cholesky(info[r])
        if low is not None:
            out[r] = 2.0 * np.log(np.diag(low)).sum()
    return out


def objective_terms(thetas, data, mode: Mode = "pseudo", criterion: Criterion = "ml") -> np.ndarray:
    """Per-study objective contributions for a stack of parameter vectors.

    ``thetas`` has shape (P, 7) (or (7,)); the result has shape (P, K). Under
    REML each study carries 1/K of the determinant penalty so that the rows
    sum to the restricted log-likelihood. Invalid points give -inf.
    """
    p = _as_prepared(data, mode)
    t = np.atleast_2d(np.asarray(thetas, dtype=float))
    terms, w11, w12, w22, ok = _woodbury(t, p)
    if criterion == "reml":
        rows_ok = ok.all(axis=1)
        logdet = _reml_logdet(p, w11, w12, w22, ok)
        pen = np.where(rows_ok, 0.5 * logdet / p.n_studies, np.inf)
        terms = terms - pen[:, None]
    elif criterion != "ml":
        raise ValueError(f"unknown criterion {criterion!r}")
    return terms


def objective(thetas, data, mode: Mode = "pseudo", criterion: Criterion = "ml") -> np.ndarray:
    """Total objective for each row of ``thetas`` (shape (P,))."""
    terms = objective_terms(thetas, data, mode, criterion)
    # fixed study-index order keeps the sum reproducible
    return np.add.reduce(terms, axis=1)


def _theta_array(theta) -> np.ndarray:
    return theta.as_array() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)


def loglik(theta, data, mode: Mode = "pseudo") -> float:
    """Σ_k ℓ_k(θ), without the 2π constant."""
    val = objective(_theta_array(theta), data, mode, "ml")[0]
    if not np.isfinite(val):
        raise NotPositiveDefiniteError("marginal covariance is not positive definite at θ")
    return float(val)


def reml_penalty(theta, data, mode: Mode = "pseudo") -> float:
    """½ log|Σ_k Z_kᵀ Σ_k^-1 Z_k|."""
    p = _as_prepared(data, mode)
    t = np.atleast_2d(_theta_array(theta))
    _, w11, w12, w22, ok = _woodbury(t, p)
    if not ok.all():
        raise NotPositiveDefiniteError("marginal covariance is not positive definite at θ")
    val = _reml_logdet(p, w11, w12, w22, ok)[0]
    if not np.isfinite(val):
        raise np.linalg.LinAlgError("Σ Z'Σ^-1 Z is singular (collinear design?)")
    return 0.5 * float(val)


def reml_loglik(theta, data, mode: Mode = "pseudo") -> float:
    p = _as_prepared(data, mode)
    return loglik(theta, p) - reml_penalty(theta, p)


def per_study_score(theta, data, mode: Mode = "pseudo", criterion: Criterion = "ml") -> np.ndarray:
    """(K, 7) matrix of numerical per-study scores ∂ℓ_k/∂θ."""
    from .numdiff import jacobian

    p = _as_prepared(data, mode)
    return jacobian(lambda t: objective_terms(t, p, criterion=criterion),
                    _theta_array(theta), LOWER, UPPER)
