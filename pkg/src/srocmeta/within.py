"""Within-study covariance of logit sensitivities and specificities.

Cumulative proportions at nested thresholds come from one multinomial, so the
logits at two thresholds are correlated. For exceedance events A ⊇ B with
probabilities p_A ≥ p_B the delta method gives

    Cov(logit p̂_A, logit p̂_B) = 1 / (n · p_A · (1 − p_B)),

which reduces to 1/(n p (1 − p)) on the diagonal. Sensitivities and
specificities are measured on different patients and are uncorrelated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import LogitStudy

Structure = Literal["diagonal", "full"]


@dataclass(frozen=True)
class WithinCov:
    omega1: np.ndarray
    omega0: np.ndarray
    structure: Structure

    @property
    def m(self) -> int:
        return self.omega1.shape[0]

    def block(self) -> np.ndarray:
        """The 2m x 2m block-diagonal matrix Ω."""
        m = self.m
        out = np.zeros((2 * m, 2 * m))
        out[:m, :m] = self.omega1
        out[m:, m:] = self.omega0
        return out


EMPTY_CELL_CORRECTION = 0.5


def _formula(p: np.ndarray, n: float) -> np.ndarray:
    hi = np.maximum.outer(p, p)
    lo = np.minimum.outer(p, p)
    return 1.0 / (n * hi * (1.0 - lo))


def _nested_cov(p: np.ndarray, n: int) -> np.ndarray:
    """Covariance for non-increasing exceedance proportions ``p``.

    Tied neighbours mean an empty multinomial cell and a correlation of
    exactly one. In that case the correlations are taken from the
    multinomial with EMPTY_CELL_CORRECTION added to every cell and rescaled
    to the plug-in variances, so the diagonal is unchanged.
    """
    cov = _formula(p, n)
    if p.size < 2 or np.all(np.diff(p) < 0):
        return cov
    cells = np.r_[1.0 - p[0], -np.diff(p), p[-1]] * n + EMPTY_CELL_CORRECTION
    total = cells.sum()
    q = 1.0 - np.cumsum(cells)[:-1] / total
    alt = _formula(q, total)
    sd = np.sqrt(np.diag(alt))
    corr = alt / np.outer(sd, sd)
    var_sd = np.sqrt(np.diag(cov))
    out = corr * np.outer(var_sd, var_sd)
    np.fill_diagonal(out, np.diag(cov))
    return out


def multinomial_cov(se, sp, n_diseased: int, n_nondiseased: int) -> WithinCov:
    """Full covariance of (logit Se_j) and (logit Sp_j) for one study.

    ``se`` must be non-increasing and ``sp`` non-decreasing, all strictly
    inside (0, 1); run the continuity correction first.
    """
    se = np.asarray(se, dtype=float)
    sp = np.asarray(sp, dtype=float)
    for name, p in (("sensitivity", se), ("specificity", sp)):
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError(f"{name} on the boundary; apply the continuity correction first")
    if np.any(np.diff(se) > 0):
        raise ValueError("sensitivities must be non-increasing in the threshold")
    if np.any(np.diff(sp) < 0):
        raise ValueError("specificities must be non-decreasing in the threshold")
    # specificities rise with the threshold; reverse to the exceedance order
    omega0 = _nested_cov(sp[::-1], n_nondiseased)[::-1, ::-1]
    return WithinCov(_nested_cov(se, n_diseased), np.ascontiguousarray(omega0), "full")


def diagonalize(w: WithinCov) -> WithinCov:
    return WithinCov(np.diag(np.diag(w.omega1)), np.diag(np.diag(w.omega0)), "diagonal")


def study_within_cov(study: LogitStudy, structure: Structure) -> WithinCov:
    """Ω for a study: diagonal plug-in variances, or the full multinomial matrix."""
    if structure == "diagonal":
        return WithinCov(np.diag(study.var1), np.diag(study.var0), "diagonal")
    if structure == "full":
        return multinomial_cov(study.se, study.sp, study.n_diseased, study.n_nondiseased)
    raise ValueError(f"unknown structure {structure!r}")
