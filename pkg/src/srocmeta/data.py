"""Study-level count data and its logit-scale representation.

A study reports, at each of its thresholds, the number of diseased subjects
testing positive (TP) and nondiseased subjects testing negative (TN). Counts
are cumulative in the threshold: TP can only fall and TN can only rise as the
threshold increases.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = ("study_id", "threshold", "tp", "tn", "n_diseased", "n_nondiseased")
THRESHOLD_ATOL = 1e-12


class DataError(ValueError):
    """Raised for malformed input or a study that breaks its invariants."""


@dataclass(frozen=True)
class CorrectionPolicy:
    """Continuity correction for proportions that hit 0 or 1.

    A proportion ``count / n`` whose count is 0 or ``n`` is replaced by
    ``(count + constant) / (n + 2 * constant)``. Other thresholds, and the
    other proportion at the same threshold, are left alone.
    """

    constant: float = 0.5
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.enabled and not self.constant > 0:
            raise ValueError("correction constant must be positive")


NO_CORRECTION = CorrectionPolicy(enabled=False)


@dataclass(frozen=True)
class Violation:
    """One broken invariant. ``index`` is the 1-based threshold position, or None."""

    kind: str
    index: int | None
    message: str

    def __str__(self) -> str:
        where = f" at j={self.index}" if self.index is not None else ""
        return f"{self.kind}{where}: {self.message}"


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    thresholds: tuple[float, ...]
    tp: tuple[int, ...]
    tn: tuple[int, ...]
    n_diseased: int
    n_nondiseased: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        object.__setattr__(self, "tp", tuple(int(v) for v in self.tp))
        object.__setattr__(self, "tn", tuple(int(v) for v in self.tn))

    @property
    def m(self) -> int:
        return len(self.thresholds)

    def subset(self, keep: Sequence[int]) -> "StudyRecord":
        """Record restricted to the threshold positions in ``keep`` (0-based)."""
        keep = sorted(keep)
        return StudyRecord(
            self.study_id,
            tuple(self.thresholds[j] for j in keep),
            tuple(self.tp[j] for j in keep),
            tuple(self.tn[j] for j in keep),
            self.n_diseased,
            self.n_nondiseased,
        )


@dataclass(frozen=True)
class LogitStudy:
    """Logit sensitivities/specificities of one study with diagonal variances.

    ``se`` and ``sp`` keep the (possibly corrected) proportions so that the
    full multinomial covariance can be rebuilt later.
    """

    study_id: str
    thresholds: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    var1: np.ndarray
    var0: np.ndarray
    corrected: bool
    se: np.ndarray
    sp: np.ndarray
    n_diseased: int
    n_nondiseased: int
    record: StudyRecord | None = field(default=None, compare=False, repr=False)

    @property
    def m(self) -> int:
        return len(self.thresholds)


def validate(rec: StudyRecord) -> list[Violation]:
    """Check a record against its invariants; an empty list means it is valid."""
    out: list[Violation] = []
    m = len(rec.thresholds)
    if m < 1:
        out.append(Violation("empty", None, "study reports no thresholds"))
    if len(rec.tp) != m or len(rec.tn) != m:
        out.append(Violation("length", None,
                             f"thresholds/tp/tn lengths differ ({m}, {len(rec.tp)}, {len(rec.tn)})"))
        return out
    if rec.n_diseased < 1:
        out.append(Violation("sample_size", None, f"n_diseased={rec.n_diseased} < 1"))
    if rec.n_nondiseased < 1:
        out.append(Violation("sample_size", None, f"n_nondiseased={rec.n_nondiseased} < 1"))
    for j in range(m):
        x = rec.thresholds[j]
        if not math.isfinite(x):
            out.append(Violation("threshold", j + 1, f"non-finite threshold {x}"))
        if j > 0:
            prev = rec.thresholds[j - 1]
            if abs(x - prev) <= THRESHOLD_ATOL:
                out.append(Violation("duplicate_threshold", j + 1, f"threshold {x} repeats"))
            elif x < prev:
                out.append(Violation("threshold_order", j + 1, f"{x} < previous {prev}"))
        if not 0 <= rec.tp[j] <= rec.n_diseased:
            out.append(Violation("tp_bound", j + 1,
                                 f"TP={rec.tp[j]} outside [0, {rec.n_diseased}]"))
        if not 0 <= rec.tn[j] <= rec.n_nondiseased:
            out.append(Violation("tn_bound", j + 1,
                                 f"TN={rec.tn[j]} outside [0, {rec.n_nondiseased}]"))
        if j > 0 and rec.tp[j] > rec.tp[j - 1]:
            out.append(Violation("tp_monotone", j + 1,
                                 f"TP increases ({rec.tp[j - 1]} -> {rec.tp[j]})"))
        if j > 0 and rec.tn[j] < rec.tn[j - 1]:
            out.append(Violation("tn_monotone", j + 1,
                                 f"TN decreases ({rec.tn[j - 1]} -> {rec.tn[j]})"))
    return out


def _proportions(counts: np.ndarray, n: int, policy: CorrectionPolicy) -> tuple[np.ndarray, bool]:
    counts = counts.astype(float)
    extreme = (counts == 0) | (counts == n)
    if not extreme.any():
        return counts / n, False
    if not policy.enabled:
        raise DataError("proportion of 0 or 1 and continuity correction disabled")
    c = policy.constant
    p = np.where(extreme, (counts + c) / (n + 2 * c), counts / n)
    return p, True


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def to_logits(rec: StudyRecord, policy: CorrectionPolicy = CorrectionPolicy()) -> LogitStudy:
    """Logit-transform a validated record; variances are 1/(n p (1-p))."""
    problems = validate(rec)
    if problems:
        raise DataError(f"study {rec.study_id!r}: " + "; ".join(map(str, problems)))
    se, c1 = _proportions(np.asarray(rec.tp), rec.n_diseased, policy)
    sp, c0 = _proportions(np.asarray(rec.tn), rec.n_nondiseased, policy)
    return LogitStudy(
        study_id=rec.study_id,
        thresholds=np.asarray(rec.thresholds, dtype=float),
        y1=logit(se),
        y0=logit(sp),
        var1=1.0 / (rec.n_diseased * se * (1.0 - se)),
        var0=1.0 / (rec.n_nondiseased * sp * (1.0 - sp)),
        corrected=c1 or c0,
        se=se,
        sp=sp,
        n_diseased=rec.n_diseased,
        n_nondiseased=rec.n_nondiseased,
        record=rec,
    )


def threshold_registry(values: Iterable[float], atol: float = THRESHOLD_ATOL) -> tuple[float, ...]:
    """Sorted union of thresholds; values within ``atol`` of a kept value are merged."""
    out: list[float] = []
    for x in sorted(values):
        if not out or x - out[-1] > atol:
            out.append(x)
    return tuple(out)


@dataclass(frozen=True)
class Dataset:
    studies: tuple[LogitStudy, ...]
    registry: tuple[float, ...]

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def records(self) -> tuple[StudyRecord, ...]:
        return tuple(s.record for s in self.studies)


def make_dataset(records: Sequence[StudyRecord],
                 policy: CorrectionPolicy = CorrectionPolicy(),
                 atol: float = THRESHOLD_ATOL) -> Dataset:
    """Validate and transform records into an immutable :class:`Dataset`."""
    seen: set[str] = set()
    for rec in records:
        if rec.study_id in seen:
            raise DataError(f"duplicate study_id {rec.study_id!r}")
        seen.add(rec.study_id)
    studies = tuple(to_logits(rec, policy) for rec in records)
    registry = threshold_registry((x for rec in records for x in rec.thresholds), atol)
    return Dataset(studies, registry)


def _parse_int(text: str, name: str, lineno: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: column {name!r} is not a number: {text!r}") from None
    if not value.is_integer():
        raise DataError(f"line {lineno}: column {name!r} must be an integer, got {text!r}")
    return int(value)


def read_records_csv(path: str | Path) -> list[StudyRecord]:
    """Parse the long-format CSV (one row per study x threshold) into records."""
    rows: dict[str, list[tuple[float, int, int, int, int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"line 1: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[idx["study_id"]].strip()
            if not sid:
                raise DataError(f"line {lineno}: empty study_id")
            try:
                x = float(row[idx["threshold"]])
            except ValueError:
                raise DataError(f"line {lineno}: bad threshold {row[idx['threshold']]!r}") from None
            if not math.isfinite(x):
                raise DataError(f"line {lineno}: non-finite threshold")
            vals = [_parse_int(row[idx[c]], c, lineno) for c in CSV_COLUMNS[2:]]
            rows.setdefault(sid, []).append((x, *vals, lineno))

    records = []
    for sid, items in rows.items():
        items.sort(key=lambda r: r[0])
        for a, b in zip(items, items[1:]):
            if abs(b[0] - a[0]) <= THRESHOLD_ATOL:
                raise DataError(f"line {b[-1]}: duplicate (study, threshold) pair ({sid}, {b[0]})")
        n1 = {r[3] for r in items}
        n0 = {r[4] for r in items}
        if len(n1) > 1 or len(n0) > 1:
            raise DataError(f"study {sid!r}: n_diseased/n_nondiseased vary across rows")
        records.append(StudyRecord(
            sid,
            tuple(r[0] for r in items),
            tuple(r[1] for r in items),
            tuple(r[2] for r in items),
            n1.pop(),
            n0.pop(),
        ))
    return records


def ingest_csv(path: str | Path, policy: CorrectionPolicy = CorrectionPolicy()) -> Dataset:
    records = read_records_csv(path)
    for rec in records:
        problems = validate(rec)
        if problems:
            raise DataError(f"study {rec.study_id!r}: " + "; ".join(map(str, problems)))
    return make_dataset(records, policy)


def records_to_json(records: Sequence[StudyRecord]) -> str:
    payload = [
        {
            "study_id": r.study_id,
            "threshold": list(r.thresholds),
            "tp": list(r.tp),
            "tn": list(r.tn),
            "n_diseased": r.n_diseased,
            "n_nondiseased": r.n_nondiseased,
        }
        for r in records
    ]
    return json.dumps(payload, indent=2)


def records_from_json(text: str) -> list[StudyRecord]:
    try:
        payload = json.loads(text)
        return [
            StudyRecord(d["study_id"], d["threshold"], d["tp"], d["tn"],
                        d["n_diseased"], d["n_nondiseased"])
            for d in payload
        ]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad dataset JSON: {exc}") from None


def write_records_csv(records: Sequence[StudyRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        for x, tp, tn in zip(r.thresholds, r.tp, r.tn):
            w.writerow([r.study_id, repr(x), tp, tn, r.n_diseased, r.n_nondiseased])
