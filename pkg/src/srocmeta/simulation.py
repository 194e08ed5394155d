"""Monte Carlo experiments: synthetic datasets, the four estimators, summaries.

Every replicate draws from its own generator ``default_rng([seed, index])``
and results are reduced in replicate order, so serial and parallel runs are
bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .data import DataError, StudyRecord, make_dataset
from .inference import FitConfig, FitError, classify_failure, normal_quantile
from .io import atomic_write_text
from .likelihood import PARAM_NAMES
from .sroc import QuadratureError, ausc, ausc_variance

log = logging.getLogger(__name__)

ESTIMATORS = ("pseudo-ml", "pseudo-reml", "riley-ml", "riley-reml")
SUMMARY_PARAMS = PARAM_NAMES + ("ausc",)
COVERAGE_PARAMS = ("alpha1", "alpha0", "gamma1", "gamma0", "ausc")
MCAR_SIZE_LAW = "uniform on {1, ..., m_max}"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    alpha1: float = 2.0
    alpha0: float = 1.0
    gamma1: float = -2.0
    gamma0: float = 1.5
    tau1_sq: float = 0.1
    tau0_sq: float = 0.1
    rho: float = 0.6
    n_studies: int = 50
    m_max: int = 5
    missingness: str = "full"
    replicates: int = 1000
    n_range: tuple[int, int] = (10, 500)
    grid_range: tuple[float, float] = (-0.5, 1.5)
    grid: tuple[float, ...] | None = None
    seed: int = 12345
    estimators: tuple[str, ...] = ESTIMATORS
    multistart: int = 1
    level: float = 0.95
    boundary_eps: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_range", tuple(int(v) for v in self.n_range))
        object.__setattr__(self, "grid_range", tuple(float(v) for v in self.grid_range))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.replicates < 1:
            out.append("replicates must be >= 1")
        if self.m_max < 1:
            out.append("m_max must be >= 1")
        if self.n_studies < 2:
            out.append("n_studies must be >= 2")
        if self.tau1_sq < 0 or self.tau0_sq < 0:
            out.append("tau^2 must be >= 0")
        if not abs(self.rho) <= 1:
            out.append("|rho| must be <= 1")
        if self.gamma0 == 0:
            out.append("gamma0 must be non-zero")
        if self.missingness not in ("full", "mcar"):
            out.append("missingness must be 'full' or 'mcar'")
        lo, hi = self.n_range
        if not (len(self.n_range) == 2 and 1 <= lo <= hi):
            out.append("n_range must satisfy 1 <= low <= high")
        if self.grid is not None:
            if len(self.grid) != self.m_max:
                out.append("grid length must equal m_max")
            elif np.any(np.diff(self.grid) <= 0):
                out.append("grid must be strictly increasing")
        elif not self.grid_range[0] < self.grid_range[1] and self.m_max > 1:
            out.append("grid_range must be increasing")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            out.append(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if self.multistart < 1:
            out.append("multistart must be >= 1")
        if not 0 < self.level < 1:
            out.append("level must lie in (0, 1)")
        return out

    @property
    def thresholds(self) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, dtype=float)
        if self.m_max == 1:
            return np.array([self.grid_range[0]])
        return np.linspace(*self.grid_range, self.m_max)

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha0, self.gamma1, self.gamma0])

    @property
    def theta(self) -> np.ndarray:
        return np.r_[self.beta, self.tau1_sq, self.tau0_sq, self.rho]

    def truth(self) -> dict[str, float]:
        out = dict(zip(PARAM_NAMES, map(float, self.theta)))
        out["ausc"] = ausc(self.beta)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("n_range", "grid_range", "estimators"):
            d[k] = list(d[k])
        if d["grid"] is not None:
            d["grid"] = list(d["grid"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        try:
            return cls.from_dict(d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "SimConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SimConfig(**d)


def _intercept_factor(cfg: SimConfig) -> np.ndarray:
    # explicit 2x2 Cholesky factor; valid also for tau^2 = 0 or |rho| = 1
    t1, t0 = math.sqrt(cfg.tau1_sq), math.sqrt(cfg.tau0_sq)
    return np.array([[t1, 0.0], [cfg.rho * t0, t0 * math.sqrt(max(0.0, 1 - cfg.rho**2))]])


def generate_dataset(cfg: SimConfig, rng: np.random.Generator) -> list[StudyRecord]:
    """Raw study counts with all ``m_max`` thresholds reported.

    Each subject gets one latent uniform; it tests positive at every
    threshold whose sensitivity (or false-positive rate) exceeds it, so counts
    are binomial at each threshold and monotone across thresholds.
    """
    x = cfg.thresholds
    low = _intercept_factor(cfg)
    lo, hi = cfg.n_range
    records = []
    for k in range(cfg.n_studies):
        a1k, a0k = np.array([cfg.alpha1, cfg.alpha0]) + low @ rng.standard_normal(2)
        n1, n0 = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        se = expit(a1k + cfg.gamma1 * x)
        sp = expit(a0k + cfg.gamma0 * x)
        u1 = rng.random(n1)
        u0 = rng.random(n0)
        tp = (u1[:, None] < se[None, :]).sum(axis=0)
        tn = (u0[:, None] < sp[None, :]).sum(axis=0)
        records.append(StudyRecord(f"s{k + 1}", x, tp, tn, n1, n0))
    return records


def apply_mcar(records: Sequence[StudyRecord], cfg: SimConfig,
               rng: np.random.Generator) -> list[StudyRecord]:
    """Keep a random threshold subset per study, independently of the counts.

    If no study keeps all of its thresholds, the last study keeps its full
    set so that the pooled design spans the grid.
    """
    if cfg.m_max == 1:
        return list(records)
    out, any_full = [], False
    for rec in records:
        size = int(rng.integers(1, cfg.m_max + 1))
        keep = np.sort(rng.choice(rec.m, size=min(size, rec.m), replace=False))
        any_full |= keep.size == rec.m
        out.append(rec.subset(keep))
    if not any_full and out:
        out[-1] = records[-1]
    return out


def replicate_data(cfg: SimConfig, index: int) -> list[StudyRecord]:
    rng = np.random.default_rng([cfg.seed, index])
    recs = generate_dataset(cfg, rng)
    if cfg.missingness == "mcar":
        recs = apply_mcar(recs, cfg, rng)
    return recs


@dataclass
class ReplicateRow:
    replicate: int
    estimator: str
    failed: bool
    reason: str
    estimate: dict[str, float]
    se: dict[str, float]


def _nan_row(index: int, est: str, reason: str) -> ReplicateRow:
    nan = {p: math.nan for p in SUMMARY_PARAMS}
    return ReplicateRow(index, est, True, reason, nan, dict(nan))


def run_replicate(cfg: SimConfig, index: int) -> list[ReplicateRow]:
    from .inference import fit

    recs = replicate_data(cfg, index)
    try:
        ds = make_dataset(recs)
    except DataError as exc:
        return [_nan_row(index, e, f"data: {exc}") for e in cfg.estimators]
    rows = []
    for est in cfg.estimators:
        method, criterion = est.split("-")
        fc = FitConfig(method=method, criterion=criterion, multistart=cfg.multistart,
                       boundary_eps=cfg.boundary_eps, level=cfg.level)
        try:
            res = fit(ds, fc)
        except FitError as exc:
            rows.append(_nan_row(index, est, f"fit: {exc}"))
            continue
        estimate = dict(zip(PARAM_NAMES, map(float, res.theta.as_array())))
        se = dict(zip(PARAM_NAMES, map(float, res.se)))
        reason = ""
        if classify_failure(res, fc):
            reason = res.status if not res.converged else (
                "singular J" if res.j_singular else "boundary")
        try:
            estimate["ausc"] = ausc(res.beta)
            se["ausc"] = math.sqrt(ausc_variance(res.beta, res.cov_beta))
        except (QuadratureError, ValueError) as exc:
            estimate["ausc"] = se["ausc"] = math.nan
            reason = reason or f"ausc: {exc}"
        if not reason and not all(math.isfinite(v) for v in se.values()):
            reason = "non-finite standard error"
        rows.append(ReplicateRow(index, est, bool(reason), reason, estimate, se))
    return rows


def _worker(args) -> list[ReplicateRow]:
    return run_replicate(*args)


@dataclass
class ParamSummary:
    true: float
    mcm: float
    mcsd: float
    ase: float
    coverage: float | None


@dataclass
class McSummary:
    estimator: str
    attempted: int
    used: int
    failed: int
    params: dict[str, ParamSummary] = field(default_factory=dict)

    @property
    def failure_rate(self) -> float:
        return self.failed / self.attempted if self.attempted else math.nan

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "attempted": self.attempted,
            "used": self.used,
            "failed": self.failed,
            "failure_rate": self.failure_rate,
            "params": {k: asdict(v) for k, v in self.params.items()},
        }


def coverage_row(truth: dict[str, float], rows: Iterable[ReplicateRow],
                 level: float = 0.95) -> dict[str, float]:
    """Fraction of replicates whose Wald interval covers the true value."""
    rows = list(rows)
    z = normal_quantile(0.5 * (1 + level))
    out = {}
    for p in COVERAGE_PARAMS:
        if not rows:
            out[p] = math.nan
            continue
        hits = [abs(r.estimate[p] - truth[p]) <= z * r.se[p] for r in rows]
        out[p] = float(np.mean(hits))
    return out


def summarize(cfg: SimConfig, rows: Sequence[ReplicateRow],
              truth: dict[str, float] | None = None) -> dict[str, McSummary]:
    truth = truth or cfg.truth()
    out = {}
    for est in cfg.estimators:
        mine = [r for r in rows if r.estimator == est]
        ok = [r for r in mine if not r.failed]
        cov = coverage_row(truth, ok, cfg.level)
        summ = McSummary(est, len(mine), len(ok), len(mine) - len(ok))
        for p in SUMMARY_PARAMS:
            v = np.array([r.estimate[p] for r in ok])
            s = np.array([r.se[p] for r in ok])
            summ.params[p] = ParamSummary(
                true=truth[p],
                mcm=float(v.mean()) if v.size else math.nan,
                mcsd=float(v.std(ddof=1)) if v.size > 1 else (0.0 if v.size else math.nan),
                ase=float(s.mean()) if s.size else math.nan,
                coverage=cov.get(p),
            )
        out[est] = summ
    return out


@dataclass
class McResult:
    config: SimConfig
    summaries: dict[str, McSummary]
    rows: list[ReplicateRow]


def run_mc(cfg: SimConfig, jobs: int = 1, log_path: str | Path | None = None) -> McResult:
    """Run all replicates and summarise each estimator over its non-failed fits."""
    tasks = [(cfg, i) for i in range(cfg.replicates)]
    rows: list[ReplicateRow] = []
    if jobs <= 1:
        for t in tasks:
            rows.extend(_worker(t))
    else:
        chunk = max(1, len(tasks) // (4 * jobs))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for r in pool.map(_worker, tasks, chunksize=chunk):
                rows.extend(r)
    result = McResult(cfg, summarize(cfg, rows), rows)
    if log_path is not None:
        atomic_write_text(log_path, replicate_csv(rows))
    return result


# ----------------------------------------------------------------- output

SUMMARY_HEADER = ("estimator", "parameter", "true", "mcm", "mcsd", "ase", "coverage",
                  "attempted", "used", "failed", "failure_rate")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(summaries: dict[str, McSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for est, s in summaries.items():
        for p, ps in s.params.items():
            w.writerow([est, p] + [_fmt(x) for x in (ps.true, ps.mcm, ps.mcsd, ps.ase, ps.coverage)]
                       + [s.attempted, s.used, s.failed, _fmt(s.failure_rate)])
    return buf.getvalue()


def summary_json(result: McResult) -> str:
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, list):
            return [clean(v) for v in o]
        return o

    doc = {
        "config": result.config.to_dict(),
        "thresholds": result.config.thresholds.tolist(),
        "mcar_subset_size": MCAR_SIZE_LAW if result.config.missingness == "mcar" else None,
        "summaries": {k: v.to_dict() for k, v in result.summaries.items()},
    }
    return json.dumps(clean(doc), indent=2) + "\n"


def replicate_csv(rows: Sequence[ReplicateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "estimator", "failed", "reason"]
               + list(SUMMARY_PARAMS) + [f"se_{p}" for p in SUMMARY_PARAMS])
    for r in rows:
        w.writerow([r.replicate, r.estimator, int(r.failed), r.reason]
                   + [_fmt(r.estimate[p]) for p in SUMMARY_PARAMS]
                   + [_fmt(r.se[p]) for p in SUMMARY_PARAMS])
    return buf.getvalue()


def write_outputs(result: McResult, csv_path: str | Path | None,
                  json_path: str | Path | None) -> None:
    if csv_path is not None:
        atomic_write_text(csv_path, summary_csv(result.summaries))
    if json_path is not None:
        atomic_write_text(json_path, summary_json(result))
