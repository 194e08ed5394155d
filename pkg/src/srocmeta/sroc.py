"""SROC curve, AUSC, delta-method uncertainty and summary operating points.

With S_D(x) = expit(α1 + γ1 x) the summary sensitivity and
S_D̄(x) = 1 − expit(α0 + γ0 x) the summary false-positive rate, the curve is
SROC(t) = S_D(S_D̄⁻¹(t)) = expit(α1 + γ1 (logit(1 − t) − α0) / γ0).
All variances are first-order delta-method approximations computed on the
probability scale.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit, logit
from scipy.stats import chi2

from .inference import FitResult, normal_quantile
from .likelihood import between_cov

QUAD_EPSABS = 1e-9
QUAD_LIMIT = 60
YOUDEN_TIE_ATOL = 1e-12


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, abserr: float):
        super().__init__(f"{message} (error estimate {abserr:.3g})")
        self.abserr = abserr


def _beta(beta) -> tuple[float, float, float, float]:
    a1, a0, g1, g0 = (float(v) for v in np.asarray(beta, dtype=float).ravel()[:4])
    if g0 == 0:
        raise ValueError("gamma0 = 0: the SROC curve is undefined")
    return a1, a0, g1, g0


def _inner(t, a0, g0):
    return (logit(1.0 - np.asarray(t, dtype=float)) - a0) / g0


def sroc_value(t, beta):
    """SROC(t) for scalar or array ``t`` in (0, 1)."""
    a1, a0, g1, g0 = _beta(beta)
    out = expit(a1 + g1 * _inner(t, a0, g0))
    return float(out) if np.ndim(out) == 0 else out


def sroc_compose(t, beta):
    """SROC via S_D(S_D̄⁻¹(t)), solving for the threshold explicitly."""
    a1, a0, g1, g0 = _beta(beta)
    x = (logit(1.0 - np.asarray(t, dtype=float)) - a0) / g0
    out = expit(a1 + g1 * x)
    return float(out) if np.ndim(out) == 0 else out


def sroc_gradient(t, beta) -> np.ndarray:
    """Partials of SROC(t) with respect to (α1, α0, γ1, γ0); shape t.shape + (4,)."""
    a1, a0, g1, g0 = _beta(beta)
    u = logit(1.0 - np.asarray(t, dtype=float)) - a0
    s = expit(a1 + g1 * u / g0)
    d = s * (1.0 - s)
    return np.stack([d, -(g1 / g0) * d, (u / g0) * d, -(g1 / g0**2) * u * d], axis=-1)


def _quad_form(g: np.ndarray, cov) -> np.ndarray:
    c = np.asarray(cov, dtype=float)[:4, :4]
    v = np.einsum("...i,ij,...j->...", g, c, g)
    return np.maximum(v, 0.0)


def sroc_variance(t, beta, cov_beta):
    out = _quad_form(sroc_gradient(t, beta), cov_beta)
    return float(out) if np.ndim(out) == 0 else out


def ausc(beta, epsabs: float = QUAD_EPSABS, limit: int = QUAD_LIMIT) -> float:
    """Area under the SROC curve by adaptive Gauss-Kronrod quadrature.

    The rule never evaluates the endpoints, where the integrand only has
    limits.
    """
    b = _beta(beta)
    val, err, *info = integrate.quad(sroc_value, 0.0, 1.0, args=(b,), epsabs=epsabs,
                                     epsrel=0.0, limit=limit, full_output=1)
    if len(info) > 1 and err > epsabs:
        raise QuadratureError("AUSC quadrature did not converge", err)
    return float(val)


def ausc_gradient(beta, epsabs: float = QUAD_EPSABS, limit: int = QUAD_LIMIT) -> np.ndarray:
    """Componentwise integral of sroc_gradient over (0, 1)."""
    b = _beta(beta)
    val, err, info = integrate.quad_vec(lambda t: sroc_gradient(t, b), 0.0, 1.0,
                                        epsabs=epsabs, epsrel=0.0, limit=limit,
                                        norm="max", full_output=True)
    if not info.success:
        raise QuadratureError("AUSC gradient quadrature did not converge", err)
    return np.asarray(val, dtype=float)


def ausc_variance(beta, cov_beta) -> float:
    return float(_quad_form(ausc_gradient(beta), cov_beta))


@dataclass(frozen=True)
class SrocPoint:
    t: float
    value: float
    variance: float
    band: tuple[float, float]


def sroc_curve(beta, cov_beta, grid: int = 101, level: float = 0.95) -> list[SrocPoint]:
    """Curve on the interior grid points of an even partition of (0, 1)."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    t = np.linspace(0.0, 1.0, grid + 2)[1:-1]
    val = sroc_value(t, beta)
    var = sroc_variance(t, beta, cov_beta)
    z = normal_quantile(0.5 * (1 + level))
    half = z * np.sqrt(var)
    lo = np.clip(val - half, 0.0, 1.0)
    hi = np.clip(val + half, 0.0, 1.0)
    return [SrocPoint(float(a), float(b), float(c), (float(d), float(e)))
            for a, b, c, d, e in zip(np.atleast_1d(t), np.atleast_1d(val),
                                     np.atleast_1d(var), lo, hi)]


@dataclass(frozen=True)
class Ellipse:
    """Region {z : (z − centre)ᵀ cov⁻¹ (z − centre) ≤ radius_sq} on the logit scale.

    Coordinates are (logit Se, logit Sp).
    """

    centre: np.ndarray
    cov: np.ndarray
    radius_sq: float

    def contains(self, z) -> np.ndarray:
        d = np.atleast_2d(np.asarray(z, dtype=float)) - self.centre
        sol = np.linalg.lstsq(self.cov, d.T, rcond=None)[0].T
        return np.einsum("ij,ij->i", d, sol) <= self.radius_sq

    def boundary(self, n: int = 100) -> np.ndarray:
        """n points on the logit-scale boundary."""
        w, v = np.linalg.eigh(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        circle = np.stack([np.cos(ang), np.sin(ang)])
        return self.centre + math.sqrt(self.radius_sq) * (root @ circle).T

    def roc_boundary(self, n: int = 100) -> np.ndarray:
        """Boundary mapped to ROC space as (1 − Sp, Se) pairs."""
        b = self.boundary(n)
        return np.column_stack([1.0 - expit(b[:, 1]), expit(b[:, 0])])


@dataclass(frozen=True)
class SummaryPoint:
    threshold: float
    sse: float
    ssp: float
    cov_logit: np.ndarray
    confidence: Ellipse
    prediction: Ellipse


def summary_point(x: float, fit: FitResult, level: float | None = None) -> SummaryPoint:
    """Summary (Se, Sp) at threshold ``x`` with confidence and prediction regions."""
    level = fit.level if level is None else level
    a1, a0, g1, g0 = fit.beta
    A = np.array([[1.0, 0.0, x, 0.0], [0.0, 1.0, 0.0, x]])
    centre = np.array([a1 + g1 * x, a0 + g0 * x])
    c = A @ fit.cov_beta @ A.T
    c = 0.5 * (c + c.T)
    t = fit.theta
    g = between_cov(t.tau1_sq, t.tau0_sq, t.rho)
    r2 = float(chi2.ppf(level, 2))
    return SummaryPoint(
        threshold=float(x),
        sse=float(expit(centre[0])),
        ssp=float(expit(centre[1])),
        cov_logit=c,
        confidence=Ellipse(centre, c, r2),
        prediction=Ellipse(centre, c + g, r2),
    )


def youden_index(x, beta):
    a1, a0, g1, g0 = np.asarray(beta, dtype=float)[:4]
    x = np.asarray(x, dtype=float)
    return expit(a1 + g1 * x) + expit(a0 + g0 * x) - 1.0


def youden_optimal(fit_or_beta, candidates: Sequence[float] | None = None,
                   refine: bool = False) -> tuple[float, float, float]:
    """Threshold maximising SSe + SSp − 1 with ties going to the smaller value.

    ``candidates`` defaults to the fit's threshold registry. With ``refine``
    the maximiser is searched continuously between the smallest and largest
    candidate.
    """
    if isinstance(fit_or_beta, FitResult):
        beta = fit_or_beta.beta
        if candidates is None:
            candidates = fit_or_beta.thresholds
    else:
        beta = np.asarray(fit_or_beta, dtype=float)
    if candidates is None or len(candidates) == 0:
        raise ValueError("need at least one candidate threshold")
    xs = np.sort(np.asarray(candidates, dtype=float))
    j = youden_index(xs, beta)
    best = int(np.flatnonzero(j >= j.max() - YOUDEN_TIE_ATOL)[0])
    x_star = float(xs[best])
    if refine and xs.size > 1 and xs[0] < xs[-1]:
        res = optimize.minimize_scalar(lambda v: -youden_index(v, beta),
                                       bounds=(xs[0], xs[-1]), method="bounded",
                                       options={"xatol": 1e-10})
        if -res.fun > j[best] + YOUDEN_TIE_ATOL:
            x_star = float(res.x)
    a1, a0, g1, g0 = beta[:4]
    return x_star, float(expit(a1 + g1 * x_star)), float(expit(a0 + g0 * x_star))


# ----------------------------------------------------------------- output

CURVE_HEADER = ("t", "sroc", "variance", "lower", "upper")


def curve_csv(points: Sequence[SrocPoint]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CURVE_HEADER) + "\n")
    for p in points:
        buf.write(f"{p.t:.17g},{p.value:.17g},{p.variance:.17g},{p.band[0]:.17g},{p.band[1]:.17g}\n")
    return buf.getvalue()


_SIZE = 800
_PAD = 60


def _xy(fpr, se) -> tuple[float, float]:
    span = _SIZE - 2 * _PAD
    return _PAD + span * float(fpr), _SIZE - _PAD - span * float(se)


def _polyline(pts, **attrs) -> str:
    coords = " ".join("{:.2f},{:.2f}".format(*_xy(a, b)) for a, b in pts)
    extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polyline points="{coords}" {extra}/>'


def curve_svg(points: Sequence[SrocPoint], summary: SummaryPoint | None = None,
              study_points: Sequence[tuple[float, float]] = (), title: str = "") -> str:
    """Self-contained SVG of the curve, its band, observed points and regions.

    Points are given in ROC space as (1 − Sp, Se).
    """
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_SIZE} {_SIZE}" '
           f'width="{_SIZE}" height="{_SIZE}">',
           f'<rect x="0" y="0" width="{_SIZE}" height="{_SIZE}" fill="white"/>']
    x0, y0 = _xy(0, 0)
    x1, y1 = _xy(1, 1)
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
               'fill="none" stroke="black"/>')
    for v in np.linspace(0, 1, 6):
        tx, _ = _xy(v, 0)
        _, ty = _xy(0, v)
        out.append(f'<text x="{tx:.1f}" y="{y0 + 20:.1f}" font-size="14" '
                   f'text-anchor="middle">{v:.1f}</text>')
        out.append(f'<text x="{x0 - 10:.1f}" y="{ty + 5:.1f}" font-size="14" '
                   f'text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{_SIZE / 2}" y="{_SIZE - 15}" font-size="16" '
               'text-anchor="middle">1 - specificity</text>')
    out.append(f'<text x="18" y="{_SIZE / 2}" font-size="16" text-anchor="middle" '
               f'transform="rotate(-90 18 {_SIZE / 2})">sensitivity</text>')
    if title:
        out.append(f'<text x="{_SIZE / 2}" y="30" font-size="18" '
                   f'text-anchor="middle">{escape(title)}</text>')
    out.append(_polyline([(0, 0), (1, 1)], fill="none", stroke="#bbbbbb", stroke_dasharray="4 4"))
    if points:
        band = [(p.t, p.band[1]) for p in points] + [(p.t, p.band[0]) for p in reversed(points)]
        coords = " ".join("{:.2f},{:.2f}".format(*_xy(a, b)) for a, b in band)
        out.append(f'<polygon points="{coords}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>')
        out.append(_polyline([(p.t, p.value) for p in points], fill="none",
                             stroke="#1f77b4", stroke_width="2"))
    for fpr, se in study_points:
        cx, cy = _xy(fpr, se)
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="none" stroke="#555555"/>')
    if summary is not None:
        for ell, colour, dash in ((summary.confidence, "#d62728", ""),
                                  (summary.prediction, "#2ca02c", ' stroke-dasharray="6 4"')):
            pts = ell.roc_boundary(120)
            coords = " ".join("{:.2f},{:.2f}".format(*_xy(a, b)) for a, b in pts)
            out.append(f'<polygon points="{coords}" fill="none" stroke="{colour}"{dash}/>')
        cx, cy = _xy(1 - summary.ssp, summary.sse)
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="5" fill="#d62728"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_curve(fit: FitResult, path: str | Path, grid: int = 101, level: float | None = None,
               fmt: Literal["csv", "svg"] = "csv", summary_x: float | None = None,
               study_points: Sequence[tuple[float, float]] = ()) -> Path:
    """Write the curve as CSV or SVG. The SVG summary point sits at
    ``summary_x``, defaulting to the Youden-optimal registry threshold."""
    from .io import atomic_write_text

    level = fit.level if level is None else level
    pts = sroc_curve(fit.beta, fit.cov_beta, grid, level)
    if fmt == "csv":
        text = curve_csv(pts)
    elif fmt == "svg":
        if summary_x is None:
            summary_x = youden_optimal(fit)[0] if fit.thresholds else 0.0
        sp = summary_point(summary_x, fit, level)
        text = curve_svg(pts, sp, study_points, title=f"{fit.method}-{fit.criterion}")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return atomic_write_text(path, text)
