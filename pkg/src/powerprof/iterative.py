"""Unknown pool, reclustering into class proposals, human review and retraining.

State lives in a review directory next to the catalog::

    pool.jsonl          append-only UNKNOWN predictions
    proposals.json      proposal records and the proposal-id counter
    review_log.jsonl    one line per decision (timestamp, operator, verdict)
    medoids/            plot-ready medoid CSVs, one per proposal
    archive/            superseded classifier models

Pool entries are never removed. A job counts as claimed while it belongs to a
pending or approved proposal; reclustering only looks at unclaimed entries, so
rejecting a proposal returns its members to the pool.
"""

from __future__ import annotations

import contextlib
import csv
import fcntl
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from powerprof import cluster as clu
from powerprof import openset
from powerprof.artifacts import file_digest, load_artifact, save_artifact
from powerprof.errors import ConfigError, DataError
from powerprof.features import FEATURE_NAMES, MEAN_POWER_INDEX
from powerprof.ingest import STEP, JobProfile

log = logging.getLogger(__name__)

POOL_FILE = "pool.jsonl"
PROPOSALS_FILE = "proposals.json"
LOG_FILE = "review_log.jsonl"
STATUSES = ("pending", "approved", "rejected")


@dataclass
class PoolEntry:
    job_id: str
    latent: list[float]
    features: list[float]
    timestamp: int
    min_distance: float | None = None
    values: list[float] | None = None


class UnknownPool:
    """Append-only JSONL store of jobs the classifier rejected."""

    def __init__(self, path):
        self.path = Path(path)

    def entries(self) -> list[PoolEntry]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        out.append(PoolEntry(**json.loads(line)))
                    except (ValueError, TypeError) as exc:
                        raise DataError(f"{self.path}: malformed pool entry, line {lineno}: {exc}") from None
        return out

    def job_ids(self) -> set[str]:
        return {e.job_id for e in self.entries()}

    def append(self, entries: Iterable[PoolEntry]) -> int:
        """Add entries whose job_id is not pooled yet; returns how many were written."""
        seen = self.job_ids()
        new = []
        for e in entries:
            if e.job_id not in seen:
                seen.add(e.job_id)
                new.append(e)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            for e in new:
                fh.write(json.dumps(asdict(e)) + "\n")
        return len(new)

    def __len__(self) -> int:
        return len(self.entries())


def pool_unknowns(
    pool: UnknownPool,
    predictions: Sequence[openset.Prediction],
    latents: dict[str, np.ndarray],
    features: dict[str, np.ndarray],
    timestamps: dict[str, int] | None = None,
    profiles: dict[str, JobProfile] | None = None,
) -> int:
    """Append every UNKNOWN prediction to the pool."""
    entries = []
    for p in predictions:
        if p.outcome != openset.UNKNOWN:
            continue
        if p.job_id not in latents or p.job_id not in features:
            raise DataError(f"no latent/feature row for pooled job {p.job_id}")
        ts = (timestamps or {}).get(p.job_id)
        if ts is None and profiles and p.job_id in profiles:
            ts = profiles[p.job_id].t0
        entries.append(
            PoolEntry(
                job_id=p.job_id,
                latent=[float(v) for v in latents[p.job_id]],
                features=[float(v) for v in features[p.job_id]],
                timestamp=int(ts or 0),
                min_distance=float(p.min_distance),
                values=None if not profiles or p.job_id not in profiles else profiles[p.job_id].values.tolist(),
            )
        )
    return pool.append(entries)


@dataclass
class ClassProposal:
    proposal_id: str
    members: list[str]
    medoid: str
    medoid_csv: str | None
    status: str = "pending"
    class_id: int | None = None
    decided_at: str | None = None
    operator: str | None = None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class ProposalStore:
    proposals: list[ClassProposal] = field(default_factory=list)
    next_proposal: int = 1

    def get(self, proposal_id: str) -> ClassProposal:
        for p in self.proposals:
            if p.proposal_id == proposal_id:
                return p
        raise DataError(f"no proposal {proposal_id!r}")

    def claimed(self) -> set[str]:
        return {j for p in self.proposals if p.status in ("pending", "approved") for j in p.members}

    def to_dict(self) -> dict:
        return {"next_proposal": self.next_proposal, "proposals": [asdict(p) for p in self.proposals]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalStore":
        return cls([ClassProposal(**p) for p in d["proposals"]], d["next_proposal"])

    @classmethod
    def load(cls, review_dir) -> "ProposalStore":
        path = Path(review_dir) / PROPOSALS_FILE
        if not path.exists():
            return cls()
        return cls.from_dict(load_artifact(path, "proposal_store"))

    def save(self, review_dir) -> None:
        save_artifact(Path(review_dir) / PROPOSALS_FILE, "proposal_store", self.to_dict())


@contextlib.contextmanager
def exclusive_lock(target):
    """Single-writer advisory lock on ``<target>.lock``."""
    lock_path = Path(str(target) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def write_medoid_csv(path, entry: PoolEntry) -> None:
    """Medoid profile as ``window,t_seconds,watts``; falls back to its features."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if entry.values is not None:
            w.writerow(["window", "t_seconds", "watts"])
            for k, v in enumerate(entry.values):
                w.writerow([k, k * STEP, repr(float(v))])
        else:
            w.writerow(["feature", "value"])
            for name, v in zip(FEATURE_NAMES, entry.features):
                w.writerow([name, repr(float(v))])


def recluster_unknowns(
    review_dir,
    eps: float,
    min_pts: int,
    min_class_size: int = 50,
) -> list[ClassProposal]:
    """DBSCAN over the unclaimed pool; clusters of at least ``min_class_size``
    become pending proposals, largest first. Returns the new proposals."""
    if min_class_size < 1:
        raise ConfigError("min_class_size must be >= 1")
    review_dir = Path(review_dir)
    with exclusive_lock(review_dir / PROPOSALS_FILE):
        store = ProposalStore.load(review_dir)
        claimed = store.claimed()
        entries = sorted((e for e in UnknownPool(review_dir / POOL_FILE).entries() if e.job_id not in claimed),
                         key=lambda e: e.job_id)
        if len(entries) < min_pts:
            log.info("pool has %d unclaimed entries, fewer than min_pts=%d; nothing to recluster", len(entries), min_pts)
            return []
        Z = np.array([e.latent for e in entries], dtype=np.float64)
        labels = clu.dbscan_labels(Z, eps, min_pts)
        groups = [np.flatnonzero(labels == k) for k in range(labels.max() + 1)]
        groups = [g for g in groups if len(g) >= min_class_size]
        # largest first, ties by first member id
        groups.sort(key=lambda g: (-len(g), entries[g[0]].job_id))
        new = []
        for g in groups:
            pid = f"P{store.next_proposal:04d}"
            store.next_proposal += 1
            med = entries[g[clu.medoid_index(Z[g])]]
            csv_rel = f"medoids/{pid}.csv"
            write_medoid_csv(review_dir / csv_rel, med)
            prop = ClassProposal(pid, sorted(entries[i].job_id for i in g), med.job_id, csv_rel)
            store.proposals.append(prop)
            new.append(prop)
        store.save(review_dir)
    return new


def review(
    review_dir,
    catalog_path,
    proposal_id: str,
    verdict: str,
    operator: str,
) -> ClassProposal:
    """Approve or reject a pending proposal.

    Approval appends a new class to the catalog with the catalog's next class
    id (ids are never reused). The catalog and proposal store are updated under
    one exclusive lock.
    """
    if verdict not in ("approve", "reject"):
        raise ConfigError("verdict must be 'approve' or 'reject'")
    if not operator:
        raise ConfigError("operator is required")
    review_dir = Path(review_dir)
    with exclusive_lock(catalog_path):
        store = ProposalStore.load(review_dir)
        prop = store.get(proposal_id)
        if prop.status != "pending":
            raise DataError(f"proposal {proposal_id} already decided ({prop.status})")
        catalog = clu.ClassCatalog.load(catalog_path)
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        if verdict == "approve":
            taken = set(catalog.labels())
            clash = taken & set(prop.members)
            if clash:
                raise DataError(f"proposal members already belong to catalog classes: {sorted(clash)[:3]}")
            entries = {e.job_id: e for e in UnknownPool(review_dir / POOL_FILE).entries()}
            med = entries.get(prop.medoid)
            F = np.array([entries[j].features for j in prop.members if j in entries])
            new_id = catalog.next_class_id
            mean_power = float(F[:, MEAN_POWER_INDEX].mean()) if len(F) else 0.0
            activity = float(clu.swing_activity(F, catalog.rules.min_swing_w).mean()) if len(F) else 0.0
            vals = [] if med is None or med.values is None else med.values
            plateau = float(np.mean(np.asarray(vals) >= catalog.rules.compute_power)) if vals else 0.0
            catalog.classes.append(
                clu.CatalogClass(
                    class_id=new_id,
                    members=list(prop.members),
                    medoid=prop.medoid,
                    medoid_values=list(vals),
                    intensity_label=catalog.rules.label(mean_power, activity, plateau),
                    mean_power=mean_power,
                    swing_activity=activity,
                    plateau_fraction=plateau,
                    source_cluster=None,
                )
            )
            catalog.next_class_id = new_id + 1
            catalog.save(catalog_path)
            prop.status, prop.class_id = "approved", new_id
        else:
            prop.status = "rejected"
        prop.decided_at, prop.operator = now, operator
        store.save(review_dir)
        with open(review_dir / LOG_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"timestamp": now, "operator": operator, "proposal_id": proposal_id,
                                 "verdict": prop.status, "class_id": prop.class_id, "size": prop.size}) + "\n")
    return prop


def archive_model(model_path, archive_dir) -> dict:
    """Copy a model file into the archive under its version and digest."""
    model = openset.ClassifierModel.load(model_path)
    digest = file_digest(model_path)
    archive_dir = Path(archive_dir)
    archive_dir.mkdir(parents=True, exist_ok=True)
    dest = archive_dir / f"classifier_v{model.version}_{digest[:12]}.json"
    dest.write_bytes(Path(model_path).read_bytes())
    record = {"version": model.version, "sha256": digest, "path": dest.name, "class_ids": model.class_ids}
    with open(archive_dir / "index.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")
    return record


def retrain(
    catalog_path,
    latents: dict[str, np.ndarray],
    model_path,
    review_dir,
    cfg: openset.ClassifierConfig | None = None,
    force: bool = False,
    test_fraction: float = 0.2,
    sweep_grid: int = 200,
    seed: int = 0,
) -> openset.ClassifierModel | None:
    """Retrain the classifier on every catalog class, including approved proposals.

    Latents of approved members come from the pool; ``latents`` covers the
    rest. tau is re-swept against the catalog residual, or left at p95 when
    the residual is empty. Unclaimed pool entries are not used as unknowns:
    the pool is filled by the old threshold, so it holds the known classes'
    own rejected tails. Returns None (and logs a
    notice) when no class is new to the current model and ``force`` is off.
    The old model is archived before the new one replaces it at
    ``model_path`` with ``version + 1``.
    """
    review_dir = Path(review_dir)
    old = openset.ClassifierModel.load(model_path)
    catalog = clu.ClassCatalog.load(catalog_path)
    new_ids = sorted(set(catalog.class_ids()) - set(old.class_ids))
    if not new_ids and not force:
        log.warning("retrain: no approved class is new to model v%d; nothing to do (use force)", old.version)
        return None

    pool = {e.job_id: e for e in UnknownPool(review_dir / POOL_FILE).entries()}
    lookup = dict(latents)
    for j, e in pool.items():
        lookup.setdefault(j, np.asarray(e.latent, dtype=np.float64))
    lab = catalog.labels()
    members = sorted(lab)
    missing = [j for j in members if j not in lookup]
    if missing:
        raise DataError(f"{len(missing)} catalog members have no latent vector, e.g. {missing[:3]}")
    Z = np.vstack([lookup[j] for j in members])
    y = np.array([lab[j] for j in members])

    cfg = cfg or old.config
    tr, te = openset.stratified_split(y, test_fraction, seed)
    model = openset.train_closed(Z[tr], y[tr], cfg)
    for cid in old.class_ids:
        if cid not in model.class_ids:
            raise DataError(f"class {cid} of the previous model is missing from the catalog")

    rest = sorted(j for j in catalog.residual if j in lookup and j not in lab)
    if rest:
        Zu = np.vstack([lookup[j] for j in rest])
        sweep = openset.sweep_threshold(model, Z[te], y[te], Zu, sweep_grid)
        model.threshold = sweep.tau_star
    else:
        log.info("retrain: no unknown validation samples; keeping tau = p95")
        sweep = None
    model.version = old.version + 1
    model.catalog_ref = file_digest(catalog_path)
    record = archive_model(model_path, review_dir / "archive")
    model.history.append({"retrained_from": record["sha256"], "new_classes": new_ids})
    model.save(model_path)
    if sweep is not None:
        sweep.write_csv(review_dir / f"sweep_v{model.version}.csv")
    return model
