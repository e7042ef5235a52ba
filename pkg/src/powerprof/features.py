"""The 186-element job feature vector and feature-matrix standardization.

Canonical order (see FEATURES.md for the full name list)::

    [0..3]     per-bin mean input power (W)
    [4..7]     per-bin median input power (W)
    [8..183]   swing counts / n, ordered by (bin 1..4, lag {1,2}, direction
               {rising, falling}, magnitude range ascending over 11 ranges)
    [184]      whole-series mean power (W)
    [185]      series length n (windows)

A swing at lag L is ``series[t+L] - series[t]``; it is attributed to the bin that
contains ``t``. Magnitudes outside [25, 3000) W and zero deltas are ignored.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from powerprof.errors import DataError
from powerprof.ingest import JobProfile

N_BINS = 4
LAGS = (1, 2)
DIRECTIONS = ("p", "n")
RANGES: tuple[tuple[int, int], ...] = (
    (25, 50),
    (50, 100),
    (100, 200),
    (200, 300),
    (300, 400),
    (400, 500),
    (500, 700),
    (700, 1000),
    (1000, 1500),
    (1500, 2000),
    (2000, 3000),
)
MIN_LEN = 8
SWING_OFFSET = 2 * N_BINS
N_SWING = N_BINS * len(LAGS) * len(DIRECTIONS) * len(RANGES)
N_FEATURES = SWING_OFFSET + N_SWING + 2
MEAN_POWER_INDEX = N_FEATURES - 2
LENGTH_INDEX = N_FEATURES - 1

assert N_FEATURES == 186


def _feature_names() -> list[str]:
    names = [f"{b}_mean_input_power" for b in range(1, N_BINS + 1)]
    names += [f"{b}_median_input_power" for b in range(1, N_BINS + 1)]
    for b in range(1, N_BINS + 1):
        for lag in LAGS:
            tag = "sfq" if lag == 1 else f"sfq{lag}"
            for d in DIRECTIONS:
                names += [f"{b}_{tag}{d}_{lo}_{hi}" for lo, hi in RANGES]
    names += ["mean_power", "length"]
    return names


FEATURE_NAMES = _feature_names()
COLUMN_NAMES = [f"f{i:03d}" for i in range(N_FEATURES)]


def swing_index(bin_: int, lag: int, direction: int, range_: int) -> int:
    """Position of a swing feature; ``bin_`` and ``range_`` are 0-based, direction 0=rising."""
    return SWING_OFFSET + ((bin_ * len(LAGS) + LAGS.index(lag)) * 2 + direction) * len(RANGES) + range_


def split_bins(n: int) -> list[tuple[int, int]]:
    """Four contiguous (start, stop) ranges; the first ``n % 4`` bins get one extra element."""
    if n < MIN_LEN:
        raise DataError(f"profile too short: {n} windows, need at least {MIN_LEN}")
    base, rem = divmod(n, N_BINS)
    bounds, start = [], 0
    for b in range(N_BINS):
        stop = start + base + (1 if b < rem else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def swing_counts(
    series: Sequence[float],
    lag: int,
    bins: list[tuple[int, int]] | None = None,
    ranges: Sequence[tuple[float, float]] = RANGES,
) -> np.ndarray:
    """Integer counts shaped (bin, direction, range); direction 0 rising, 1 falling."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    bins = bins or split_bins(n)
    counts = np.zeros((len(bins), 2, len(ranges)), dtype=np.int64)
    if n <= lag:
        return counts
    delta = x[lag:] - x[:-lag]
    mag = np.abs(delta)
    los = np.array([lo for lo, _ in ranges], dtype=np.float64)
    his = np.array([hi for _, hi in ranges], dtype=np.float64)
    r = np.searchsorted(los, mag, side="right") - 1
    rc = np.clip(r, 0, len(ranges) - 1)
    valid = (delta != 0) & (r >= 0) & (mag < his[rc])
    r = rc
    stops = np.array([stop for _, stop in bins])
    b = np.searchsorted(stops, np.arange(n - lag), side="right")
    direction = (delta < 0).astype(np.int64)
    np.add.at(counts, (b[valid], direction[valid], r[valid]), 1)
    return counts


def _mean(seg: np.ndarray) -> float:
    return math.fsum(seg) / len(seg)


def _median(seg: np.ndarray) -> float:
    s = np.sort(seg)
    m = len(s) // 2
    if len(s) % 2:
        return float(s[m])
    return float((s[m - 1] + s[m]) / 2)


@dataclass(eq=False)
class FeatureVector:
    job_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_FEATURES,):
            raise DataError(f"feature vector for {self.job_id} has shape {self.values.shape}")


def extract_features(profile: JobProfile | Sequence[float], job_id: str | None = None) -> FeatureVector:
    if isinstance(profile, JobProfile):
        x, job_id = profile.values, profile.job_id if job_id is None else job_id
    else:
        x = np.asarray(profile, dtype=np.float64)
    n = len(x)
    bins = split_bins(n)
    out = np.empty(N_FEATURES)
    for b, (lo, hi) in enumerate(bins):
        out[b] = _mean(x[lo:hi])
        out[N_BINS + b] = _median(x[lo:hi])
    for lag in LAGS:
        c = swing_counts(x, lag, bins)
        for b in range(N_BINS):
            for d in range(2):
                start = swing_index(b, lag, d, 0)
                out[start : start + len(RANGES)] = c[b, d] / n
    out[MEAN_POWER_INDEX] = _mean(x)
    out[LENGTH_INDEX] = n
    return FeatureVector(job_id or "", out)


def feature_matrix(profiles: Iterable[JobProfile]) -> tuple[list[str], np.ndarray]:
    """Rows ordered by job_id."""
    profiles = sorted(profiles, key=lambda p: p.job_id)
    if not profiles:
        return [], np.zeros((0, N_FEATURES))
    X = np.vstack([extract_features(p).values for p in profiles])
    return [p.job_id for p in profiles], X


@dataclass(eq=False)
class Scaler:
    """Per-feature z-score. A feature whose fitted std is (numerically) zero is
    degenerate and always maps to 0."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if (self.stds < 0).any():
            raise DataError("scaler stds must be non-negative")

    @property
    def degenerate(self) -> np.ndarray:
        return self.stds <= 1e-12 * np.maximum(1.0, np.abs(self.means))

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.means):
            raise DataError(f"scaler expects width {len(self.means)}, got {X.shape[-1]}")
        deg = self.degenerate
        safe = np.where(deg, 1.0, self.stds)
        Z = (X - self.means) / safe
        return np.where(deg, 0.0, Z)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["means"], dtype=np.float64), np.array(d["stds"], dtype=np.float64))


def fit_scaler(X) -> Scaler:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("fit_scaler needs at least 2 rows")
    return Scaler(X.mean(axis=0), X.std(axis=0))


def apply_scaler(scaler: Scaler, x) -> np.ndarray:
    return scaler.transform(x)


def write_matrix_csv(path: str | os.PathLike, job_ids: Sequence[str], X: np.ndarray, columns: Sequence[str]) -> None:
    """``job_id,<columns>`` rows with shortest round-trip float text."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(job_ids) or X.shape[1] != len(columns):
        raise DataError(f"matrix shape {X.shape} does not match {len(job_ids)} ids x {len(columns)} columns")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["job_id", *columns])
        for jid, row in zip(job_ids, X):
            w.writerow([jid, *(repr(float(v)) for v in row)])


def write_feature_csv(path: str | os.PathLike, job_ids: Sequence[str], X: np.ndarray) -> None:
    write_matrix_csv(path, job_ids, X, COLUMN_NAMES)


def read_matrix_csv(path: str | os.PathLike, prefix: str) -> tuple[list[str], np.ndarray]:
    """Read a ``job_id,<prefix>0..`` CSV (features or latents)."""
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "job_id" or not all(h.startswith(prefix) for h in header[1:]):
            raise DataError(f"{path}: expected header job_id,{prefix}...")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: malformed row, line {lineno}")
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}: malformed row, line {lineno}") from None
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return ids, X


def read_feature_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    ids, X = read_matrix_csv(path, "f")
    if X.shape[1] != N_FEATURES:
        raise DataError(f"{path}: expected {N_FEATURES} feature columns, got {X.shape[1]}")
    return ids, X


def features_markdown() -> str:
    lines = [
        "# Feature catalogue",
        "",
        "Column order of the 186-element feature vector (`f000`..`f185` in feature CSVs).",
        "Swing features count deltas `x[t+lag] - x[t]` whose magnitude falls in `[lo, hi)` W,",
        "attributed to the bin containing `t` and divided by the series length `n`.",
        "`sfq` = lag 1, `sfq2` = lag 2; suffix `p` = rising, `n` = falling.",
        "",
        "| column | name |",
        "|---|---|",
    ]
    lines += [f"| {c} | {n} |" for c, n in zip(COLUMN_NAMES, FEATURE_NAMES)]
    return "\n".join(lines) + "\n"
