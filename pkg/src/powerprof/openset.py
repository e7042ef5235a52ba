"""Closed- and open-set classification of latent vectors with the class-anchor-clustering loss.

A dense ReLU network maps a latent vector to an N-dimensional logit vector f(x).
During training the logits are pulled toward fixed anchors ``c_j = alpha * e_j``
with

    L = log(1 + sum_{j != y} exp(d_y - d_j)) + lambda * d_y,   d_j = ||f(x) - c_j||

After training the per-class mean logit vectors become the centers used at
inference. A sample is UNKNOWN when its distance to the nearest center exceeds
the threshold tau; otherwise it takes the nearest center's class (lowest class id
on ties). Open-set accuracy is the balanced mean of the known-class hit rate
and the unknown rejection rate.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from powerprof.artifacts import load_artifact, save_artifact
from powerprof.errors import ConfigError, DataError, NumericError
from powerprof.neural import Network, RMSProp

log = logging.getLogger(__name__)

UNKNOWN = "UNKNOWN"
ARTIFACT_KIND = "classifier_model"


@dataclass
class ClassifierConfig:
    input_dim: int = 10
    hidden: tuple[int, ...] = (64, 64)
    anchor_magnitude: float = 10.0
    lam: float = 0.1
    lr: float = 1e-3
    rho: float = 0.9
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.anchor_magnitude <= 0:
            raise ConfigError("anchor magnitude must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad classifier config: {exc}") from None


def anchors(n_classes: int, magnitude: float = 10.0) -> np.ndarray:
    return magnitude * np.eye(n_classes)


def center_distances(logits: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = np.asarray(logits)[:, None, :] - np.asarray(centers)[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def cac_loss(logits, y, anchor_points, lam: float = 0.1, return_grad: bool = False):
    """Mean CAC loss over a batch; with ``return_grad`` also d(mean loss)/d(logits).

    Returns ``(loss, tuplet, anchor)`` (batch means), plus the gradient when requested.
    """
    f = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    C = np.asarray(anchor_points, dtype=np.float64)
    B, N = f.shape
    if C.shape != (N, N):
        raise DataError(f"anchors must be {N}x{N}, got {C.shape}")
    diff = f[:, None, :] - C[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    rows = np.arange(B)
    d_y = d[rows, y]
    gap = d_y[:, None] - d
    gap[rows, y] = -np.inf
    # log(1 + sum exp(gap)) computed as logsumexp over [0, gap...]
    m = np.maximum(gap.max(axis=1), 0.0)
    s = np.exp(-m) + np.exp(gap - m[:, None]).sum(axis=1)
    tuplet = m + np.log(s)
    total = tuplet + lam * d_y
    out = (float(total.mean()), float(tuplet.mean()), float(d_y.mean()))
    if not return_grad:
        return out
    w = np.exp(gap - tuplet[:, None])  # d tuplet / d(gap_j); 0 for j == y
    g_d = -w
    g_d[rows, y] = w.sum(axis=1) + lam
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d[:, :, None] > 0, diff / d[:, :, None], 0.0)
    g_f = (g_d[:, :, None] * unit).sum(axis=1) / B
    return out, g_f


@dataclass
class Prediction:
    job_id: str
    outcome: int | str
    min_distance: float
    distances: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierModel:
    network: Network
    anchors: np.ndarray
    centers: np.ndarray
    class_ids: list[int]
    input_mean: np.ndarray
    input_std: np.ndarray
    threshold: float
    train_p95: float
    config: ClassifierConfig
    version: int = 1
    catalog_ref: str | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def logits(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return self.network.forward((Z - self.input_mean) / self.input_std, training=False)

    def distances(self, Z) -> np.ndarray:
        return center_distances(self.logits(Z), self.centers)

    def assign(self, Z, tau: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(class ids with -1 for unknown, min distances, all distances)."""
        tau = self.threshold if tau is None else tau
        D = self.distances(Z)
        # scan centers in class-id order so ties go to the lowest class id
        by_id = np.argsort(self.class_ids, kind="stable")
        idx = by_id[D[:, by_id].argmin(axis=1)]
        mind = D[np.arange(len(D)), idx]
        ids = np.asarray(self.class_ids)[idx]
        return np.where(mind > tau, -1, ids), mind, D

    def fingerprint(self) -> str:
        return self.network.fingerprint()

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "anchors": self.anchors.tolist(),
            "centers": self.centers.tolist(),
            "class_ids": [int(c) for c in self.class_ids],
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "threshold": float(self.threshold),
            "train_p95": float(self.train_p95),
            "config": asdict(self.config),
            "model_version": self.version,
            "catalog_ref": self.catalog_ref,
            "fingerprint": self.fingerprint(),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        return cls(
            network=Network.from_dict(d["network"]),
            anchors=np.array(d["anchors"], dtype=np.float64),
            centers=np.array(d["centers"], dtype=np.float64),
            class_ids=[int(c) for c in d["class_ids"]],
            input_mean=np.array(d["input_mean"], dtype=np.float64),
            input_std=np.array(d["input_std"], dtype=np.float64),
            threshold=float(d["threshold"]),
            train_p95=float(d["train_p95"]),
            config=ClassifierConfig.from_dict(d["config"]),
            version=int(d.get("model_version", 1)),
            catalog_ref=d.get("catalog_ref"),
            history=list(d.get("history", [])),
        )

    def save(self, path) -> None:
        save_artifact(path, ARTIFACT_KIND, self.to_dict())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        return cls.from_dict(load_artifact(path, ARTIFACT_KIND))


def stratified_split(labels: Sequence[int], test_fraction: float = 0.2, seed: int = 0):
    """Per-class shuffled split; returns sorted (train_idx, test_idx)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1 if test_fraction > 0 else 0), len(idx) - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def train_closed(latents, labels, cfg: ClassifierConfig | None = None) -> ClassifierModel:
    cfg = cfg or ClassifierConfig()
    Z = np.asarray(latents, dtype=np.float64)
    y_raw = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[1] != cfg.input_dim or len(Z) != len(y_raw):
        raise DataError(f"expected {cfg.input_dim}-d latents with one label each, got {Z.shape} / {y_raw.shape}")
    class_ids, y, counts = np.unique(y_raw, return_inverse=True, return_counts=True)
    if len(class_ids) < 2:
        raise DataError("need at least 2 known classes")
    if counts.min() < 2:
        bad = class_ids[counts < 2].tolist()
        raise DataError(f"classes with fewer than 2 samples: {bad}")
    N = len(class_ids)

    rng = np.random.default_rng(cfg.seed)
    net = Network.mlp([cfg.input_dim, *cfg.hidden, N], rng)
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Zs = (Z - mu) / sd
    A = anchors(N, cfg.anchor_magnitude)
    opt = RMSProp(cfg.lr, cfg.rho)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(Zs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            net.zero_grad()
            f = net.forward(Zs[b], training=True)
            (loss, _, _), g = cac_loss(f, y[b], A, cfg.lam, return_grad=True)
            net.backward(g)
            opt.step_networks([net])
            losses.append(loss * len(b))
        mean_loss = float(np.sum(losses) / len(order))
        if not np.isfinite(mean_loss):
            raise NumericError(f"non-finite CAC loss at epoch {epoch}; recent history: {history[-3:]}")
        history.append({"epoch": epoch, "cac_loss": mean_loss})

    logits = net.forward(Zs, training=False)
    centers = np.vstack([logits[y == k].mean(axis=0) for k in range(N)])
    D = center_distances(logits, centers)
    p95 = float(np.percentile(D.min(axis=1), 95))
    return ClassifierModel(
        network=net,
        anchors=A,
        centers=centers,
        class_ids=[int(c) for c in class_ids],
        input_mean=mu,
        input_std=sd,
        threshold=p95,
        train_p95=p95,
        config=cfg,
        history=history,
    )


def predict(model: ClassifierModel, latents, tau: float | None = None, job_ids: Sequence[str] | None = None):
    """Predictions for a batch of latents; ``tau=inf`` gives the closed-set answer."""
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    ids, mind, D = model.assign(Z, tau)
    job_ids = list(job_ids) if job_ids is not None else [str(i) for i in range(len(Z))]
    return [
        Prediction(j, UNKNOWN if c < 0 else int(c), float(m), [float(v) for v in row])
        for j, c, m, row in zip(job_ids, ids, mind, D)
    ]


def open_set_accuracy(pred_known, true_known, pred_unknown) -> float:
    """Balanced accuracy: half known-class hit rate, half unknown rejection rate.

    ``pred_*`` hold class ids with -1 for UNKNOWN. NaN when either side is empty.
    """
    pred_known, true_known, pred_unknown = map(np.asarray, (pred_known, true_known, pred_unknown))
    if len(pred_known) == 0 or len(pred_unknown) == 0:
        return float("nan")
    return 0.5 * float(np.mean(pred_known == true_known)) + 0.5 * float(np.mean(pred_unknown == -1))


@dataclass
class SweepResult:
    taus: np.ndarray
    accuracy: np.ndarray
    known_accuracy: np.ndarray
    unknown_rejection: np.ndarray
    tau_star: float
    tau_max: float

    @property
    def best_accuracy(self) -> float:
        return float(self.accuracy.max())

    @property
    def normalized_taus(self) -> np.ndarray:
        return self.taus / self.tau_max if self.tau_max > 0 else self.taus

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("tau,tau_normalized,accuracy,known_accuracy,unknown_rejection\n")
            for row in zip(self.taus, self.normalized_taus, self.accuracy, self.known_accuracy, self.unknown_rejection):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def sweep_threshold(model: ClassifierModel, known_Z, known_y, unknown_Z, grid_size: int = 200) -> SweepResult:
    """Balanced open-set accuracy over tau in [0, 3 * p95] (p95 of training
    nearest-center distances); tau* is the first maximizer."""
    known_Z = np.atleast_2d(np.asarray(known_Z, dtype=np.float64))
    unknown_Z = np.atleast_2d(np.asarray(unknown_Z, dtype=np.float64))
    known_y = np.asarray(known_y)
    if len(known_Z) == 0 or len(unknown_Z) == 0 or known_Z.size == 0 or unknown_Z.size == 0:
        raise DataError("threshold sweep needs non-empty known and unknown sets")
    if grid_size < 2:
        raise ConfigError("grid_size must be >= 2")
    tau_max = 3.0 * model.train_p95
    taus = np.linspace(0.0, tau_max, grid_size)
    ck, mk, _ = model.assign(known_Z, np.inf)
    _, mu, _ = model.assign(unknown_Z, np.inf)
    correct = ck == known_y
    known_acc = np.array([np.mean(correct & (mk <= t)) for t in taus])
    rej = np.array([np.mean(mu > t) for t in taus])
    acc = 0.5 * known_acc + 0.5 * rej
    best = int(np.argmax(acc))
    return SweepResult(taus, acc, known_acc, rej, float(taus[best]), float(tau_max))


def evaluate(model: ClassifierModel, tau: float, latents, labels) -> dict:
    """Metrics on a labeled test set. A label outside the model's classes marks an unknown sample."""
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    labels = np.asarray(labels)
    known_set = set(model.class_ids)
    is_known = np.array([l in known_set for l in labels.tolist()], dtype=bool)
    if len(Z) == 0:
        raise DataError("empty test set")
    closed, _, _ = model.assign(Z, np.inf)
    opened, _, _ = model.assign(Z, tau)
    closed_acc = float(np.mean(closed[is_known] == labels[is_known])) if is_known.any() else float("nan")
    open_acc = open_set_accuracy(opened[is_known], labels[is_known], opened[~is_known])
    index = {c: i for i, c in enumerate(model.class_ids)}
    N = model.n_classes
    counts = np.zeros((N, N))
    for t, p in zip(labels[is_known], closed[is_known]):
        counts[index[int(t)], index[int(p)]] += 1
    sums = counts.sum(axis=1, keepdims=True)
    confusion = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    return {
        "closed_acc": closed_acc,
        "open_acc": open_acc,
        "known_hit_rate": float(np.mean(opened[is_known] == labels[is_known])) if is_known.any() else float("nan"),
        "unknown_rejection": float(np.mean(opened[~is_known] == -1)) if (~is_known).any() else float("nan"),
        "n_known": int(is_known.sum()),
        "n_unknown": int((~is_known).sum()),
        "tau": float(tau),
        "class_ids": list(model.class_ids),
        "confusion": confusion.tolist(),
    }


def write_predictions(path: str | os.PathLike, predictions: Sequence[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_dict()) + "\n")


def read_predictions(path: str | os.PathLike) -> list[Prediction]:
    if not os.path.exists(path):
        raise DataError(f"predictions file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [Prediction(**json.loads(line)) for line in fh if line.strip()]
