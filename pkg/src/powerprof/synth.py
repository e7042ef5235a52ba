"""Labeled synthetic job power profiles.

Seven shape families stand in for the recurring power patterns seen on large
systems (flat compute plateaus, periodic swings, ramps, spikes, phase shifts,
noisy idle-ish jobs). Every class is one :class:`PatternSpec`; class ids follow
the order of the pattern list.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from powerprof.errors import ConfigError, DataError
from powerprof.ingest import MIN_PROFILE_LEN, JobProfile, write_profiles

FAMILIES = ("constant", "square_wave", "ramp_up", "ramp_down", "spike_train", "plateau_shift", "noise_flat")
PERIODIC = ("square_wave", "spike_train")
DAY = 86_400
MONTH_DAYS = 30
YEAR_START = 1_609_459_200  # 2021-01-01T00:00:00Z


@dataclass
class PatternSpec:
    family: str
    base_power: float
    swing_amplitude: float = 0.0
    period: int = 4
    noise_std: float = 0.0
    intensity: str = "high"
    # first 30-day month in which jobs of this class may be submitted
    active_from_month: int = 0
    # per-job relative jitter of base power and amplitude (uniform +-jitter);
    # when > 0 periodic phases and the plateau step position are also randomized
    jitter: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown pattern family {self.family!r}")
        if self.base_power <= 0:
            raise ConfigError("base_power must be positive")
        if self.swing_amplitude < 0 or self.noise_std < 0:
            raise ConfigError("swing_amplitude and noise_std must be non-negative")
        if self.family in PERIODIC and self.period < 2:
            raise ConfigError("periodic families need period >= 2")
        if self.intensity not in ("high", "low"):
            raise ConfigError("intensity must be 'high' or 'low'")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must be in [0, 1)")

    def kernel(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Noise-free shape for one job (jitter and noise_flat draw from ``rng``)."""
        t = np.arange(n)
        b, a = float(self.base_power), float(self.swing_amplitude)
        phase, step_at = 0, n // 2
        if self.jitter > 0:
            b *= 1 + rng.uniform(-self.jitter, self.jitter)
            a *= 1 + rng.uniform(-self.jitter, self.jitter)
            phase = int(rng.integers(self.period))
            step_at = int(rng.integers(int(0.3 * n), int(0.7 * n) + 1))
        if self.family == "constant":
            return np.full(n, b)
        if self.family == "square_wave":
            return b + (a / 2) * np.where(((t + phase) % self.period) < self.period // 2, 1.0, -1.0)
        if self.family == "ramp_up":
            return b - a / 2 + a * t / max(n - 1, 1)
        if self.family == "ramp_down":
            return b + a / 2 - a * t / max(n - 1, 1)
        if self.family == "spike_train":
            return b + a * (((t + phase) % self.period) == self.period // 2)
        if self.family == "plateau_shift":
            return b + a * (t >= step_at)
        return b + rng.normal(0.0, a, size=n)


@dataclass
class SynthDataset:
    profiles: list[JobProfile]
    labels: dict[str, int]
    timestamps: dict[str, int]
    specs: list[PatternSpec] = field(default_factory=list)

    def subset(self, job_ids) -> "SynthDataset":
        keep = set(job_ids)
        return SynthDataset(
            [p for p in self.profiles if p.job_id in keep],
            {k: v for k, v in self.labels.items() if k in keep},
            {k: v for k, v in self.timestamps.items() if k in keep},
            self.specs,
        )


def default_specs(jitter: float = 0.1) -> list[PatternSpec]:
    """Eight classes spanning the compute / mixed / non-compute x high / low taxonomy.

    Amplitudes sit mid-range in the swing-magnitude table so a +-10 % jitter
    keeps each class inside one range.
    """
    j = jitter
    return [
        PatternSpec("constant", 2000, 0, noise_std=15, intensity="high", jitter=j, name="flat-high"),
        PatternSpec("constant", 150, 0, noise_std=5, intensity="low", jitter=j, name="flat-idle"),
        PatternSpec("square_wave", 800, 600, period=4, noise_std=15, intensity="low", jitter=j, name="square-600"),
        PatternSpec("square_wave", 1600, 1750, period=8, noise_std=20, intensity="high", jitter=j, name="square-1750"),
        PatternSpec("ramp_up", 1000, 1200, noise_std=8, intensity="high", jitter=j, name="ramp-up"),
        PatternSpec("ramp_down", 1000, 1200, noise_std=8, intensity="high", jitter=j, name="ramp-down"),
        PatternSpec("spike_train", 400, 1250, period=6, noise_std=10, intensity="low", jitter=j, name="spikes-1250"),
        PatternSpec("plateau_shift", 300, 1250, noise_std=10, intensity="low", jitter=j, name="step-up"),
    ]


def novel_spec(jitter: float = 0.1) -> PatternSpec:
    """A ninth pattern kept out of the default set, used for class-injection runs."""
    return PatternSpec("noise_flat", 1200, 90, noise_std=0, intensity="high", jitter=jitter, name="noisy-flat")


def generate_dataset(
    specs: list[PatternSpec],
    jobs_per_class: int,
    length_range: tuple[int, int] = (40, 160),
    seed: int = 0,
    year_days: int = 12 * MONTH_DAYS,
    start_epoch: int = YEAR_START,
    first_class_id: int = 0,
    prefix: str = "job",
) -> SynthDataset:
    if not specs:
        raise ConfigError("at least one pattern spec is required")
    if jobs_per_class < 1:
        raise ConfigError("jobs_per_class must be >= 1")
    lo, hi = length_range
    if lo < MIN_PROFILE_LEN:
        raise ConfigError(f"length_range min {lo} is below the minimum profile length {MIN_PROFILE_LEN}")
    if hi < lo:
        raise ConfigError("length_range max must be >= min")
    rng = np.random.default_rng(seed)
    profiles, labels, stamps = [], {}, {}
    for c, spec in enumerate(specs):
        class_id = first_class_id + c
        first_day = spec.active_from_month * MONTH_DAYS
        if first_day >= year_days:
            raise ConfigError(f"class {class_id} becomes active after the synthetic year ends")
        for j in range(jobs_per_class):
            n = int(rng.integers(lo, hi + 1))
            submit = start_epoch + int(rng.uniform(first_day, year_days) * DAY)
            x = spec.kernel(n, rng)
            if spec.noise_std > 0:
                x = x + rng.normal(0.0, spec.noise_std, size=n)
            x = np.maximum(x, 0.0)
            job_id = f"{prefix}{class_id:03d}-{j:05d}"
            profiles.append(JobProfile(job_id, submit, x, 1, None))
            labels[job_id] = class_id
            stamps[job_id] = submit
    return SynthDataset(profiles, labels, stamps, list(specs))


def merge(*datasets: SynthDataset) -> SynthDataset:
    out = SynthDataset([], {}, {}, [])
    for d in datasets:
        clash = set(out.labels) & set(d.labels)
        if clash:
            raise DataError(f"job_id collision when merging datasets: {sorted(clash)[:3]}")
        out.profiles += d.profiles
        out.labels.update(d.labels)
        out.timestamps.update(d.timestamps)
        out.specs += d.specs
    return out


def load_specs(path: str | os.PathLike) -> list[PatternSpec]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad spec file {path}: {exc}") from None
    if isinstance(raw, dict):
        raw = raw.get("specs", [])
    try:
        return [PatternSpec(**d) for d in raw]
    except TypeError as exc:
        raise ConfigError(f"bad pattern spec: {exc}") from None


def dump_specs(specs: list[PatternSpec]) -> str:
    return json.dumps([asdict(s) for s in specs], indent=1)


def write_labels(path: str | os.PathLike, ds: SynthDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["job_id", "class_id", "submit_epoch"])
        for jid in sorted(ds.labels):
            w.writerow([jid, ds.labels[jid], ds.timestamps[jid]])


def read_labels(path: str | os.PathLike) -> tuple[dict[str, int], dict[str, int]]:
    if not os.path.exists(path):
        raise DataError(f"labels file not found: {path}")
    labels, stamps = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            labels[row["job_id"]] = int(row["class_id"])
            stamps[row["job_id"]] = int(row["submit_epoch"])
    return labels, stamps


def write_dataset(out_dir: str | os.PathLike, ds: SynthDataset) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles_path, labels_path = out / "profiles.jsonl", out / "labels.csv"
    write_profiles(profiles_path, sorted(ds.profiles, key=lambda p: p.job_id))
    write_labels(labels_path, ds)
    return profiles_path, labels_path
