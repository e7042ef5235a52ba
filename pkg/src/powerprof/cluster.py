"""Clustering of latent vectors, cluster-quality scores and the class catalog."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from powerprof.artifacts import load_artifact, save_artifact
from powerprof.errors import ConfigError, DataError
from powerprof.features import MEAN_POWER_INDEX, RANGES, swing_index
from powerprof.ingest import JobProfile

INTENSITY_LABELS = ("CIH", "CIL", "MH", "ML", "NCH", "NCL")


@dataclass
class ClusterResult:
    job_ids: list[str]
    labels: np.ndarray
    algorithm: str
    params: dict
    centroids: np.ndarray | None = None

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max() + 1) if len(self.labels) and self.labels.max() >= 0 else 0

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels < 0)) if len(self.labels) else 0.0

    def label_map(self) -> dict[str, int]:
        return {j: int(l) for j, l in zip(self.job_ids, self.labels)}

    def to_dict(self) -> dict:
        d = {"algorithm": self.algorithm, "params": self.params, "labels": self.label_map()}
        if self.centroids is not None:
            d["centroids"] = self.centroids.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterResult":
        ids = sorted(d["labels"])
        cents = d.get("centroids")
        return cls(
            ids,
            np.array([d["labels"][j] for j in ids], dtype=np.int64),
            d["algorithm"],
            dict(d.get("params", {})),
            None if cents is None else np.array(cents, dtype=np.float64),
        )

    def save(self, path) -> None:
        save_artifact(path, "cluster_result", self.to_dict())

    @classmethod
    def load(cls, path) -> "ClusterResult":
        return cls.from_dict(load_artifact(path, "cluster_result"))


def _as_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if not np.isfinite(P).all():
        raise DataError("points must be finite")
    return P


def dbscan_labels(points, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels in input order (-1 = noise).

    The eps-neighborhood is closed (d <= eps) and includes the point itself.
    Clusters are seeded by scanning points in input order and expanded
    breadth-first; a border point joins the first cluster that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
    P = _as_points(points)
    n = len(P)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neigh = cKDTree(P).query_ball_point(P, r=eps)
    neigh = [sorted(nb) for nb in neigh]
    core = np.array([len(nb) >= min_pts for nb in neigh])
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cid
        frontier = [i]
        head = 0
        while head < len(frontier):
            p = frontier[head]
            head += 1
            for q in neigh[p]:
                if labels[q] == -1:
                    labels[q] = cid
                    if core[q]:
                        frontier.append(q)
        cid += 1
    return labels


def knn_eps(points, min_pts: int, quantile: float = 0.9) -> float:
    """Label-free eps: a quantile of each point's distance to its ``min_pts``-th
    neighbor (self included), so roughly ``quantile`` of the points are core."""
    P = _as_points(points)
    if len(P) < min_pts:
        raise DataError(f"need at least min_pts={min_pts} points to pick eps, got {len(P)}")
    if not 0 < quantile <= 1:
        raise ConfigError("quantile must be in (0, 1]")
    d, _ = cKDTree(P).query(P, k=min_pts)
    kth = d if min_pts == 1 else d[:, -1]
    return float(np.quantile(kth, quantile))


def dbscan(points, eps: float, min_pts: int, job_ids: Sequence[str] | None = None) -> ClusterResult:
    P = _as_points(points)
    ids = list(job_ids) if job_ids is not None else [str(i) for i in range(len(P))]
    return ClusterResult(ids, dbscan_labels(P, eps, min_pts), "dbscan", {"eps": eps, "min_pts": min_pts})


def _sq_dists(P: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((P[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-9,
    job_ids: Sequence[str] | None = None,
) -> ClusterResult:
    """k-means++ seeding followed by Lloyd iterations.

    Assignment ties go to the lowest centroid index. A centroid left with no
    points is moved onto the point currently farthest from its own centroid.
    ``params["inertia_history"]`` records the inertia after every assignment.
    """
    P = _as_points(points)
    n = len(P)
    if not 1 <= k <= n:
        raise ConfigError(f"kmeans needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    C = np.empty((k, P.shape[1]))
    C[0] = P[rng.integers(n)]
    d2 = _sq_dists(P, C[:1]).min(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        C[j] = P[idx]
        d2 = np.minimum(d2, _sq_dists(P, C[j : j + 1])[:, 0])

    history = []
    for it in range(max_iter):
        D = _sq_dists(P, C)
        assign = D.argmin(axis=1)
        history.append(float(D[np.arange(n), assign].sum()))
        newC = C.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                newC[j] = P[members].mean(axis=0)
            else:
                far = int(D[np.arange(n), assign].argmax())
                newC[j] = P[far]
                assign[far] = j
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
        C = newC
        if shift < tol:
            break
    D = _sq_dists(P, C)
    assign = D.argmin(axis=1)
    inertia = float(D[np.arange(n), assign].sum())
    history.append(inertia)
    ids = list(job_ids) if job_ids is not None else [str(i) for i in range(n)]
    params = {"k": k, "seed": seed, "max_iter": max_iter, "tol": tol, "iterations": it + 1,
              "inertia": inertia, "inertia_history": history}
    return ClusterResult(ids, assign.astype(np.int64), "kmeans", params, C)


def predict_nearest(result: ClusterResult, x) -> int:
    if result.centroids is None:
        raise DataError(f"{result.algorithm} result has no centroids to predict with")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(_sq_dists(x, result.centroids)[0].argmin())


def _entropy(counts) -> float:
    counts = np.asarray([c for c in counts if c > 0], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(a, b) -> float:
    """H(A | B) over the empirical joint distribution, natural log."""
    n = len(a)
    joint = Counter(zip(a, b))
    marg_b = Counter(b)
    return float(-sum((c / n) * math.log(c / marg_b[kb]) for (_, kb), c in joint.items()))


def homogeneity(true_labels, predicted_labels) -> float:
    """1 - H(C|K)/H(C). The noise label -1 is just another cluster."""
    t, p = list(true_labels), list(predicted_labels)
    if len(t) != len(p) or not t:
        raise DataError("homogeneity needs two equal-length, non-empty label sequences")
    h_c = _entropy(Counter(t).values())
    if h_c == 0:
        return 1.0
    return max(0.0, 1.0 - _conditional_entropy(t, p) / h_c)


def completeness(true_labels, predicted_labels) -> float:
    return homogeneity(predicted_labels, true_labels)


def v_measure(true_labels, predicted_labels) -> float:
    h, c = homogeneity(true_labels, predicted_labels), completeness(true_labels, predicted_labels)
    return 0.0 if h + c == 0 else 2 * h * c / (h + c)


def silhouette(points, labels) -> float:
    """Mean silhouette over non-noise points; singleton clusters score 0."""
    P = _as_points(points)
    labels = np.asarray(labels)
    keep = labels >= 0
    P, labels = P[keep], labels[keep]
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise DataError("silhouette needs at least 2 clusters")
    D = np.sqrt(_sq_dists(P, P))
    scores = np.zeros(len(P))
    for i in range(len(P)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == u].mean() for u in uniq if u != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


def grid_search_dbscan(points, true_labels, eps_grid, min_pts_grid, max_noise: float = 0.2) -> dict:
    """Pick (eps, min_pts) maximizing V-measure subject to a noise-fraction cap."""
    best = None
    for eps in eps_grid:
        for mp in min_pts_grid:
            labels = dbscan_labels(points, eps, mp)
            noise = float(np.mean(labels < 0))
            if noise > max_noise or labels.max() < 1:
                continue
            score = v_measure(true_labels, labels)
            if best is None or score > best["v_measure"]:
                best = {"eps": float(eps), "min_pts": int(mp), "v_measure": score,
                        "homogeneity": homogeneity(true_labels, labels), "noise": noise,
                        "n_clusters": int(labels.max() + 1)}
    if best is None:
        raise DataError("no (eps, min_pts) pair satisfied the noise cap")
    return best


@dataclass
class IntensityRules:
    """Constants of the intensity-labeling rule.

    * swing activity A = mean over members of the summed length-normalized swing
      counts (both lags, all bins) with magnitude >= ``min_swing_w``
    * A >= ``high_swing``  -> mixed operation (M)
    * otherwise compute-intensive (CI) if the mean fraction of windows at or
      above ``compute_power`` is >= ``plateau_fraction``; else non-compute (NC)
      when A <= ``low_swing``, mixed when ``low_swing < A < high_swing``
    * suffix H if the class mean of whole-series mean power >= ``power_split``, else L
    """

    power_split: float = 1000.0
    high_swing: float = 0.2
    low_swing: float = 0.1
    min_swing_w: float = 100.0
    compute_power: float = 500.0
    plateau_fraction: float = 0.6

    def label(self, mean_power: float, activity: float, plateau: float) -> str:
        if activity >= self.high_swing:
            kind = "M"
        elif plateau >= self.plateau_fraction:
            kind = "CI"
        elif activity <= self.low_swing:
            kind = "NC"
        else:
            kind = "M"
        return kind + ("H" if mean_power >= self.power_split else "L")


def swing_activity(F: np.ndarray, min_swing_w: float) -> np.ndarray:
    cols = [
        swing_index(b, lag, d, r)
        for b in range(4)
        for lag in (1, 2)
        for d in range(2)
        for r, (lo, _) in enumerate(RANGES)
        if lo >= min_swing_w
    ]
    return np.asarray(F)[:, cols].sum(axis=1)


@dataclass
class CatalogClass:
    class_id: int
    members: list[str]
    medoid: str
    medoid_values: list[float]
    intensity_label: str
    mean_power: float
    swing_activity: float
    plateau_fraction: float
    source_cluster: int | None = None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class ClassCatalog:
    classes: list[CatalogClass]
    residual: list[str]
    min_class_size: int = 50
    rules: IntensityRules = field(default_factory=IntensityRules)
    next_class_id: int = 0

    def __post_init__(self):
        seen: set[str] = set()
        for c in self.classes:
            if seen & set(c.members):
                raise DataError("catalog classes must be disjoint")
            seen |= set(c.members)
        if self.classes:
            self.next_class_id = max(self.next_class_id, max(c.class_id for c in self.classes) + 1)

    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def labels(self) -> dict[str, int]:
        return {j: c.class_id for c in self.classes for j in c.members}

    def get(self, class_id: int) -> CatalogClass:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)

    def to_dict(self) -> dict:
        return {
            "classes": [dict(asdict(c), size=c.size) for c in self.classes],
            "residual": list(self.residual),
            "min_class_size": self.min_class_size,
            "rules": asdict(self.rules),
            "next_class_id": self.next_class_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        classes = []
        for c in d["classes"]:
            c = {k: v for k, v in c.items() if k != "size"}
            classes.append(CatalogClass(**c))
        return cls(classes, list(d["residual"]), d["min_class_size"], IntensityRules(**d["rules"]),
                   d.get("next_class_id", 0))

    def save(self, path) -> None:
        save_artifact(path, "class_catalog", self.to_dict())

    @classmethod
    def load(cls, path) -> "ClassCatalog":
        return cls.from_dict(load_artifact(path, "class_catalog"))


def medoid_index(P: np.ndarray) -> int:
    """Row with the minimum summed Euclidean distance to the others (first on ties)."""
    P = np.asarray(P, dtype=np.float64)
    sums = np.zeros(len(P))
    for start in range(0, len(P), 512):
        block = P[start : start + 512]
        sums[start : start + 512] = np.sqrt(_sq_dists(block, P)).sum(axis=1)
    return int(sums.argmin())


def build_catalog(
    result: ClusterResult,
    profiles: dict[str, JobProfile] | Sequence[JobProfile],
    features: dict[str, np.ndarray] | tuple[Sequence[str], np.ndarray],
    latents: tuple[Sequence[str], np.ndarray] | None = None,
    min_class_size: int = 50,
    rules: IntensityRules | None = None,
) -> ClassCatalog:
    """Turn clusters into classes; small clusters and noise go to the residual.

    Class ids are assigned densely in ascending order of the source cluster
    label. The medoid is taken in latent space when latents are given, else in
    raw feature space.
    """
    rules = rules or IntensityRules()
    if not isinstance(profiles, dict):
        profiles = {p.job_id: p for p in profiles}
    if isinstance(features, tuple):
        features = dict(zip(features[0], np.asarray(features[1])))
    lat = None
    if latents is not None:
        lat = dict(zip(latents[0], np.asarray(latents[1])))

    missing = [j for j in result.job_ids if j not in features or j not in profiles]
    if missing:
        raise DataError(f"{len(missing)} clustered jobs lack features or profiles, e.g. {missing[:3]}")

    groups: dict[int, list[str]] = {}
    residual = []
    for jid, lab in zip(result.job_ids, result.labels):
        if lab < 0:
            residual.append(jid)
        else:
            groups.setdefault(int(lab), []).append(jid)

    classes = []
    for lab in sorted(groups):
        members = sorted(groups[lab])
        if len(members) < min_class_size:
            residual.extend(members)
            continue
        F = np.vstack([features[j] for j in members])
        space = np.vstack([lat[j] for j in members]) if lat is not None else F
        med = members[medoid_index(space)]
        mean_power = float(F[:, MEAN_POWER_INDEX].mean())
        activity = float(swing_activity(F, rules.min_swing_w).mean())
        plateau = float(np.mean([np.mean(profiles[j].values >= rules.compute_power) for j in members]))
        classes.append(
            CatalogClass(
                class_id=len(classes),
                members=members,
                medoid=med,
                medoid_values=profiles[med].values.tolist(),
                intensity_label=rules.label(mean_power, activity, plateau),
                mean_power=mean_power,
                swing_activity=activity,
                plateau_fraction=plateau,
                source_cluster=lab,
            )
        )
    return ClassCatalog(classes, sorted(residual), min_class_size, rules, len(classes))
