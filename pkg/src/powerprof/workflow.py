"""End-to-end pipeline runs, run manifests and the temporal evaluation harness."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from powerprof import cluster as clu
from powerprof import features as feat
from powerprof import gan, ingest, openset
from powerprof.artifacts import file_digest, load_artifact, save_artifact
from powerprof.errors import ConfigError, DataError, PowerprofError
from powerprof.synth import DAY, MONTH_DAYS

log = logging.getLogger(__name__)

STAGES = ("ingest", "features", "scaler", "gan", "embed", "cluster", "catalog", "classifier", "sweep")
STAGE_VERSION = 1
ARTIFACTS = {
    "profiles": "profiles.jsonl",
    "features": "features.csv",
    "scaler": "scaler.json",
    "gan": "gan.json",
    "latents": "latents.csv",
    "clusters": "clusters.json",
    "catalog": "catalog.json",
    "classifier": "classifier.json",
    "sweep": "sweep.csv",
}
MANIFEST = "manifest.json"


def latent_columns(d: int) -> list[str]:
    return [f"z{i}" for i in range(d)]


def write_latents(path, job_ids: Sequence[str], Z: np.ndarray) -> None:
    feat.write_matrix_csv(path, job_ids, Z, latent_columns(np.asarray(Z).shape[1]))


def read_latents(path) -> tuple[list[str], np.ndarray]:
    return feat.read_matrix_csv(path, "z")


@dataclass
class DbscanConfig:
    # None picks eps from the data via the min_pts-th neighbor distance quantile
    eps: float | None = None
    min_pts: int = 10
    eps_quantile: float = 0.9

    def __post_init__(self):
        if self.min_pts < 1:
            raise ConfigError("min_pts must be >= 1")
        if self.eps is not None and self.eps <= 0:
            raise ConfigError("eps must be positive")

    def resolve_eps(self, Z) -> float:
        return self.eps if self.eps is not None else clu.knn_eps(Z, self.min_pts, self.eps_quantile)


@dataclass
class PipelineConfig:
    """Inputs are either ``profiles`` (JSONL) or ``telemetry`` + ``jobs``."""

    out: str = "run"
    seed: int = 0
    profiles: str | None = None
    telemetry: str | None = None
    jobs: str | None = None
    min_profile_len: int = ingest.MIN_PROFILE_LEN
    gan: gan.GanConfig = field(default_factory=gan.GanConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    min_class_size: int = 50
    classifier: openset.ClassifierConfig = field(default_factory=openset.ClassifierConfig)
    test_fraction: float = 0.2
    sweep_grid: int = 200

    def __post_init__(self):
        if isinstance(self.gan, dict):
            self.gan = gan.GanConfig.from_dict(self.gan)
        if isinstance(self.dbscan, dict):
            try:
                self.dbscan = DbscanConfig(**self.dbscan)
            except TypeError as exc:
                raise ConfigError(f"bad dbscan config: {exc}") from None
        if isinstance(self.classifier, dict):
            self.classifier = openset.ClassifierConfig.from_dict(self.classifier)
        if self.profiles is None and (self.telemetry is None or self.jobs is None):
            raise ConfigError("config needs either 'profiles' or both 'telemetry' and 'jobs'")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunManifest:
    out: str
    seed: int
    stage_seeds: dict[str, int]
    config: dict
    inputs: dict[str, str]
    artifacts: dict[str, dict]
    stages: dict[str, dict]
    summary: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return Path(self.out) / self.artifacts[name]["path"]

    def verify(self) -> list[str]:
        """Names of artifacts that are missing or whose digest drifted."""
        bad = []
        for name, rec in self.artifacts.items():
            p = self.path(name)
            if not p.exists() or file_digest(p) != rec["sha256"]:
                bad.append(name)
        return bad

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self) -> None:
        save_artifact(Path(self.out) / MANIFEST, "run_manifest", self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**load_artifact(path, "run_manifest"))


def stage_seeds(seed: int) -> dict[str, int]:
    """One independent seed per stage, derived from the run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {s: int(c.generate_state(1)[0]) for s, c in zip(STAGES, children)}


class _Stage:
    """Times a stage and prefixes any failure with ``stage=<name>``."""

    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, etype, exc, tb):
        self.timings[self.name] = {"version": STAGE_VERSION, "seconds": round(time.perf_counter() - self.t0, 3)}
        if exc is None:
            return False
        msg = f"stage={self.name}: {exc}"
        if isinstance(exc, PowerprofError):
            raise type(exc)(msg) from exc
        if isinstance(exc, (OSError, ValueError, KeyError)):
            raise DataError(msg) from exc
        return False


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    """ingest -> features -> scaler -> GAN -> embed -> DBSCAN -> catalog -> classifier -> sweep.

    Every stage writes its artifact before the next starts, so a failed run
    leaves the finished stages on disk.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg.seed)
    timings: dict[str, dict] = {}
    inputs: dict[str, str] = {}
    summary: dict = {}
    paths = {k: out / v for k, v in ARTIFACTS.items()}

    with _Stage("ingest", timings):
        if cfg.profiles is not None:
            if not os.path.exists(cfg.profiles):
                raise DataError(f"profiles file not found: {cfg.profiles}")
            inputs[str(cfg.profiles)] = file_digest(cfg.profiles)
            profiles = [p for p in ingest.read_profiles(cfg.profiles) if len(p) >= cfg.min_profile_len]
            profiles.sort(key=lambda p: p.job_id)
        else:
            for p in (cfg.telemetry, cfg.jobs):
                if not os.path.exists(p):
                    raise DataError(f"input file not found: {p}")
                inputs[str(p)] = file_digest(p)
            jobs = ingest.load_jobs(cfg.jobs)
            profiles, build = ingest.build_profiles(jobs, ingest.parse_telemetry(cfg.telemetry), cfg.min_profile_len)
            summary["ingest"] = build.to_dict()
        if not profiles:
            raise DataError("no usable job profiles")
        ingest.write_profiles(paths["profiles"], profiles)

    with _Stage("features", timings):
        ids, X = feat.feature_matrix(profiles)
        feat.write_feature_csv(paths["features"], ids, X)

    with _Stage("scaler", timings):
        scaler = feat.fit_scaler(X)
        save_artifact(paths["scaler"], "scaler", scaler.to_dict())
        Xs = scaler.transform(X)

    with _Stage("gan", timings):
        gcfg = gan.GanConfig.from_dict(dict(asdict(cfg.gan), seed=seeds["gan"]))
        model = gan.train(Xs, gcfg, scaler)
        model.save(paths["gan"])
        summary["gan"] = {"initial_mse": model.history[0]["recon_mse"], "final_mse": model.history[-1]["recon_mse"]}

    with _Stage("embed", timings):
        Z = gan.encode(model, Xs)
        write_latents(paths["latents"], ids, Z)

    with _Stage("cluster", timings):
        eps = cfg.dbscan.resolve_eps(Z)
        result = clu.dbscan(Z, eps, cfg.dbscan.min_pts, ids)
        result.save(paths["clusters"])
        summary["cluster"] = {"eps": eps, "n_clusters": result.n_clusters, "noise_fraction": result.noise_fraction}

    with _Stage("catalog", timings):
        catalog = clu.build_catalog(result, profiles, (ids, X), (ids, Z), cfg.min_class_size)
        catalog.save(paths["catalog"])
        if len(catalog.classes) < 2:
            raise DataError(f"only {len(catalog.classes)} class(es) reached min_class_size={cfg.min_class_size}")

    with _Stage("classifier", timings):
        row = {j: i for i, j in enumerate(ids)}
        lab = catalog.labels()
        members = sorted(lab)
        Zk = Z[[row[j] for j in members]]
        yk = np.array([lab[j] for j in members])
        tr, te = openset.stratified_split(yk, cfg.test_fraction, seeds["classifier"])
        ccfg = openset.ClassifierConfig.from_dict(dict(asdict(cfg.classifier), seed=seeds["classifier"]))
        clf = openset.train_closed(Zk[tr], yk[tr], ccfg)

    with _Stage("sweep", timings):
        Zu = Z[[row[j] for j in catalog.residual]]
        if len(Zu):
            sweep = openset.sweep_threshold(clf, Zk[te], yk[te], Zu, cfg.sweep_grid)
            clf.threshold = sweep.tau_star
        else:
            # nothing left unclustered to act as unknowns: keep tau = p95
            sweep = known_only_sweep(clf, Zk[te], yk[te], cfg.sweep_grid)
        clf.catalog_ref = file_digest(paths["catalog"])
        clf.save(paths["classifier"])
        sweep.write_csv(paths["sweep"])
        ev = openset.evaluate(clf, clf.threshold, Zk[te], yk[te])
        summary["classifier"] = {
            "n_classes": clf.n_classes,
            "threshold": clf.threshold,
            "train_p95": clf.train_p95,
            "held_out_closed_acc": ev["closed_acc"],
            "n_unknown_validation": int(len(Zu)),
        }

    manifest = RunManifest(
        out=str(out),
        seed=cfg.seed,
        stage_seeds=seeds,
        config=cfg.to_dict(),
        inputs=inputs,
        artifacts={k: {"path": v, "sha256": file_digest(out / v)} for k, v in ARTIFACTS.items()},
        stages=timings,
        summary=summary,
    )
    manifest.save()
    return manifest


def known_only_sweep(model: openset.ClassifierModel, known_Z, known_y, grid_size: int = 200) -> openset.SweepResult:
    """Sweep record when no unknown samples exist: accuracy is undefined (NaN), tau* = p95."""
    tau_max = 3.0 * model.train_p95
    taus = np.linspace(0.0, tau_max, grid_size)
    ck, mk, _ = model.assign(known_Z, np.inf)
    correct = ck == np.asarray(known_y)
    known_acc = np.array([np.mean(correct & (mk <= t)) for t in taus])
    nan = np.full(grid_size, np.nan)
    return openset.SweepResult(taus, nan, known_acc, nan, float(model.train_p95), float(tau_max))


# ---------------------------------------------------------------- temporal evaluation

@dataclass
class SplitRecord:
    train_months: int
    anchor_month: int
    horizon_days: int
    train_window: tuple[int, int]
    test_window: tuple[int, int]
    n_train: int
    n_test_known: int
    n_test_novel: int
    known_classes: list[int]
    closed_acc: float
    open_acc: float


@dataclass
class TemporalResult:
    rows: list[dict]
    splits: list[SplitRecord]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "splits": [asdict(s) for s in self.splits]}

    def write_csv(self, path) -> None:
        cols = ["train_months", "horizon_days", "n_anchors", "closed_acc", "open_acc", "known_classes"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")


def temporal_eval(
    latents,
    labels: Sequence[int],
    timestamps: Sequence[int],
    train_months: Sequence[int] = (1, 3, 6, 9, 11),
    horizons_days: Sequence[int] = (7, 30, 90),
    cfg: openset.ClassifierConfig | None = None,
    origin: int | None = None,
    min_class_samples: int = 5,
    tau: str | float = "p95",
) -> TemporalResult:
    """Train on m consecutive 30-day months, test on the following horizon.

    The anchor (first training month) slides one month at a time while the
    test window still fits in the data. Classes with at least
    ``min_class_samples`` training samples are known; later-appearing classes
    count as unknown in the open-set score. ``tau="p95"`` uses the training
    p95 threshold; a number fixes tau.
    """
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    t = np.asarray(timestamps, dtype=np.int64)
    if not (len(Z) == len(y) == len(t)) or len(Z) == 0:
        raise DataError("latents, labels and timestamps must be non-empty and of equal length")
    if not train_months or not horizons_days:
        raise ConfigError("train_months and horizons_days must be non-empty")
    cfg = cfg or openset.ClassifierConfig(input_dim=Z.shape[1])
    origin = int(t.min()) if origin is None else int(origin)
    month, max_h = MONTH_DAYS * DAY, max(horizons_days) * DAY
    span = int(t.max()) - origin + 1
    need = max(train_months) * month + max_h
    if span < need:
        raise DataError(
            f"insufficient span: timestamps cover {span / DAY:.1f} days, need {need / DAY:.0f} days "
            f"({max(train_months)} months of {MONTH_DAYS} days + {max(horizons_days)} day horizon)"
        )

    splits: list[SplitRecord] = []
    for m in train_months:
        a = 0
        while (a + m) * month + max_h <= span:
            lo, hi = origin + a * month, origin + (a + m) * month
            in_train = (t >= lo) & (t < hi)
            cls, cnt = np.unique(y[in_train], return_counts=True)
            known = cls[cnt >= min_class_samples]
            if len(known) < 2:
                raise DataError(f"fewer than 2 known classes in months [{a}, {a + m})")
            sel = in_train & np.isin(y, known)
            model = openset.train_closed(Z[sel], y[sel], cfg)
            tau_v = model.train_p95 if tau == "p95" else float(tau)
            for h in horizons_days:
                tlo, thi = hi, hi + h * DAY
                # audit: the test window must start at or after the training window ends
                in_test = (t >= tlo) & (t < thi)
                if tlo < hi or (in_test & in_train).any():
                    raise AssertionError(f"train/test windows overlap at m={m}, anchor={a}, horizon={h}")
                is_known = np.isin(y, known)
                kt, ut = in_test & is_known, in_test & ~is_known
                closed = model.assign(Z[kt], np.inf)[0] if kt.any() else np.array([])
                opened_k = model.assign(Z[kt], tau_v)[0] if kt.any() else np.array([])
                opened_u = model.assign(Z[ut], tau_v)[0] if ut.any() else np.array([])
                splits.append(
                    SplitRecord(
                        train_months=m,
                        anchor_month=a,
                        horizon_days=h,
                        train_window=(lo, hi),
                        test_window=(tlo, thi),
                        n_train=int(sel.sum()),
                        n_test_known=int(kt.sum()),
                        n_test_novel=int(ut.sum()),
                        known_classes=[int(c) for c in known],
                        closed_acc=float(np.mean(closed == y[kt])) if kt.any() else float("nan"),
                        open_acc=openset.open_set_accuracy(opened_k, y[kt], opened_u),
                    )
                )
            a += 1

    rows = []
    for m in train_months:
        for h in horizons_days:
            group = [s for s in splits if s.train_months == m and s.horizon_days == h]
            closed = np.array([s.closed_acc for s in group])
            opened = np.array([s.open_acc for s in group])
            rows.append(
                {
                    "train_months": m,
                    "horizon_days": h,
                    "n_anchors": len(group),
                    "closed_acc": _nanmean(closed),
                    "open_acc": _nanmean(opened),
                    "known_classes": float(np.mean([len(s.known_classes) for s in group])),
                }
            )
    return TemporalResult(rows, splits)


def _nanmean(a: np.ndarray) -> float:
    a = a[~np.isnan(a)]
    return float(a.mean()) if len(a) else float("nan")
