"""Telemetry + scheduler log ingestion into per-node-normalized 10 s job profiles.

Inputs:

* telemetry CSV with header ``timestamp,hostname,input_power_w`` (1 Hz node input power)
* jobs JSONL, one object per line: ``job_id, start, end, nodes[], project?, domain?``

Each node's samples are reduced to 10 s window means aligned to the job start;
the job profile is the mean across the job's nodes per window.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from powerprof.errors import DataError

log = logging.getLogger(__name__)

STEP = 10
MIN_PROFILE_LEN = 8
TELEMETRY_HEADER = ["timestamp", "hostname", "input_power_w"]


@dataclass(frozen=True)
class PowerSample:
    timestamp: int
    hostname: str
    input_power: float


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    start: int
    end: int
    nodes: tuple[str, ...]
    project: str | None = None
    domain: str | None = None

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"job {self.job_id}: end must be after start")
        if not self.nodes:
            raise DataError(f"job {self.job_id}: empty node list")


@dataclass(eq=False)
class JobProfile:
    job_id: str
    t0: int
    values: np.ndarray
    node_count: int = 1
    domain: str | None = None
    step: int = STEP

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.step != STEP:
            raise DataError(f"profile {self.job_id}: step must be {STEP}, got {self.step}")
        if self.node_count < 1:
            raise DataError(f"profile {self.job_id}: node_count must be positive")
        if self.values.ndim != 1 or (self.values < 0).any() or not np.isfinite(self.values).all():
            raise DataError(f"profile {self.job_id}: values must be a finite non-negative series")

    def __len__(self):
        return len(self.values)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "t0": int(self.t0),
            "step": self.step,
            "node_count": int(self.node_count),
            "domain": self.domain,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobProfile":
        return cls(
            job_id=str(d["job_id"]),
            t0=int(d["t0"]),
            values=d["values"],
            node_count=int(d.get("node_count", 1)),
            domain=d.get("domain"),
            step=int(d.get("step", STEP)),
        )


@dataclass
class BuildSummary:
    retained: int = 0
    dropped: Counter = field(default_factory=Counter)
    dropped_jobs: list = field(default_factory=list)

    def drop(self, job_id: str, reason: str) -> None:
        self.dropped[reason] += 1
        self.dropped_jobs.append({"job_id": job_id, "reason": reason})
        log.info("dropping job %s: %s", job_id, reason)

    def to_dict(self) -> dict:
        return {"retained": self.retained, "dropped": dict(self.dropped), "dropped_jobs": self.dropped_jobs}


class LeadingGapError(DataError):
    pass


def parse_telemetry(path: str | os.PathLike) -> Iterator[PowerSample]:
    """Yield one PowerSample per CSV row, in file order."""
    if not os.path.exists(path):
        raise DataError(f"telemetry file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != TELEMETRY_HEADER:
            raise DataError(f"bad telemetry header {header!r}, expected {','.join(TELEMETRY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"malformed row, line {lineno}")
            try:
                ts = int(row[0])
                host = row[1].strip()
                watts = float(row[2])
            except ValueError:
                raise DataError(f"malformed row, line {lineno}") from None
            if not host or ts < 0 or not np.isfinite(watts):
                raise DataError(f"malformed row, line {lineno}")
            if watts < 0:
                raise DataError(f"negative power, line {lineno}")
            yield PowerSample(ts, host, watts)


def load_jobs(path: str | os.PathLike) -> list[JobRecord]:
    if not os.path.exists(path):
        raise DataError(f"jobs file not found: {path}")
    jobs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                job = JobRecord(
                    job_id=str(d["job_id"]),
                    start=int(d["start"]),
                    end=int(d["end"]),
                    nodes=tuple(sorted(set(d["nodes"]))),
                    project=d.get("project"),
                    domain=d.get("domain"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"malformed job record, line {lineno}: {exc}") from None
            if job.job_id in seen:
                raise DataError(f"duplicate job_id {job.job_id!r}, line {lineno}")
            seen.add(job.job_id)
            jobs.append(job)
    return jobs


def _window_means(ts: np.ndarray, watts: np.ndarray, t0: int, n_windows: int) -> np.ndarray:
    """Per-window means; NaN marks a window with no samples."""
    idx = (ts - t0) // STEP
    keep = (ts >= t0) & (idx < n_windows)
    idx = idx[keep].astype(np.int64)
    sums = np.bincount(idx, weights=watts[keep], minlength=n_windows)
    counts = np.bincount(idx, minlength=n_windows)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _fill_gaps(means: np.ndarray) -> np.ndarray:
    if np.isnan(means[0]):
        raise LeadingGapError("first window has no samples")
    out = means.copy()
    for k in range(1, len(out)):
        if np.isnan(out[k]):
            out[k] = out[k - 1]
    return out


def aggregate_10s(samples: Iterable, t0: int, t1: int) -> np.ndarray:
    """Mean power per 10 s window over [t0, t1) for one node.

    ``samples`` holds PowerSample objects or ``(timestamp, watts)`` pairs. Only
    full windows are produced; an empty window repeats the previous value and an
    empty first window raises :class:`LeadingGapError`.
    """
    if t1 <= t0:
        raise DataError("aggregate_10s needs t1 > t0")
    pairs = [(s.timestamp, s.input_power) if isinstance(s, PowerSample) else tuple(s) for s in samples]
    n_windows = (t1 - t0) // STEP
    if n_windows == 0:
        return np.zeros(0)
    arr = np.array(sorted(pairs), dtype=np.float64).reshape(-1, 2)
    ts = arr[:, 0].astype(np.int64)
    return _fill_gaps(_window_means(ts, arr[:, 1], t0, n_windows))


def _index_telemetry(telemetry: Iterable[PowerSample]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    per_host: dict[str, list] = {}
    for s in telemetry:
        per_host.setdefault(s.hostname, []).append((s.timestamp, s.input_power))
    index = {}
    for host, rows in per_host.items():
        arr = np.array(rows, dtype=np.float64)
        # sort on (timestamp, watts) so the window sums never depend on row order
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]
        index[host] = (arr[:, 0].astype(np.int64), arr[:, 1])
    return index


def build_profiles(
    jobs: Iterable[JobRecord],
    telemetry: Iterable[PowerSample],
    min_profile_len: int = MIN_PROFILE_LEN,
) -> tuple[list[JobProfile], BuildSummary]:
    """Job profiles sorted by job_id, plus a summary of dropped jobs and why."""
    index = _index_telemetry(telemetry)
    summary = BuildSummary()
    profiles = []
    for job in sorted(jobs, key=lambda j: j.job_id):
        n_windows = (job.end - job.start) // STEP
        if n_windows < min_profile_len:
            summary.drop(job.job_id, "too_short")
            continue
        rows = []
        reason = None
        for node in sorted(job.nodes):
            if node not in index:
                reason = "missing_node"
                break
            ts, watts = index[node]
            lo = np.searchsorted(ts, job.start, side="left")
            hi = np.searchsorted(ts, job.start + n_windows * STEP, side="left")
            if hi == lo:
                reason = "missing_node"
                break
            try:
                rows.append(_fill_gaps(_window_means(ts[lo:hi], watts[lo:hi], job.start, n_windows)))
            except LeadingGapError:
                reason = "leading_gap"
                break
        if reason is not None:
            summary.drop(job.job_id, reason)
            continue
        values = np.mean(np.vstack(rows), axis=0)
        profiles.append(JobProfile(job.job_id, job.start, values, len(rows), job.domain))
        summary.retained += 1
    return profiles, summary


def write_profiles(path: str | os.PathLike, profiles: Iterable[JobProfile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_dict()) + "\n")


def read_profiles(path: str | os.PathLike) -> list[JobProfile]:
    if not os.path.exists(path):
        raise DataError(f"profiles file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(JobProfile.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"malformed profile, line {lineno}: {exc}") from None
    return out
