import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_dbscan, hand_homogeneity
from powerprof import cluster
from powerprof.cluster import ClusterResult, IntensityRules, build_catalog, dbscan, homogeneity, kmeans
from powerprof.errors import ConfigError, DataError
from powerprof.features import extract_features
from powerprof.ingest import JobProfile


def test_two_blobs():
    pts = [(0, 0), (0, 0.1), (0.1, 0), (10, 10), (10, 10.1)]
    r = dbscan(pts, 0.5, 2)
    assert r.labels.tolist() == [0, 0, 0, 1, 1]
    assert r.n_clusters == 2 and r.noise_fraction == 0


def test_isolated_point_is_noise():
    assert dbscan([(0, 0), (0, 0.1), (5, 5)], 0.5, 2).labels.tolist() == [0, 0, -1]


def test_neighborhood_is_closed_and_self_inclusive():
    # exactly eps apart: each point sees itself and the other
    assert dbscan([(0.0,), (1.0,)], 1.0, 2).labels.tolist() == [0, 0]
    assert dbscan([(0.0,)], 0.1, 1).labels.tolist() == [0]


def test_border_point_goes_to_first_cluster():
    # 1.0 is a border point of both groups; the group scanned first claims it
    pts = [(1.0,), (1.8,), (1.85,), (1.9,), (2.0,), (0.0,), (0.05,), (0.1,), (0.2,)]
    labels = dbscan(pts, 0.85, 4).labels.tolist()
    assert labels == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    assert labels == brute_dbscan(pts, 0.85, 4)


def test_dbscan_parameter_validation():
    with pytest.raises(ConfigError):
        dbscan([(0, 0)], 0, 2)
    with pytest.raises(DataError):
        dbscan([(0, np.nan)], 1, 2)


@pytest.mark.parametrize("seed", range(5))
def test_dbscan_matches_brute_force_3d(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3))
    eps = float(rng.uniform(0.3, 1.2))
    min_pts = int(rng.integers(2, 7))
    assert dbscan(pts, eps, min_pts).labels.tolist() == brute_dbscan(pts.tolist(), eps, min_pts)


def test_knn_eps():
    pts = np.arange(10, dtype=float)[:, None]
    # 2nd neighbor (self included) of every point is at distance 1
    assert cluster.knn_eps(pts, 2, 0.5) == 1.0
    with pytest.raises(DataError):
        cluster.knn_eps(pts, 11)


def test_kmeans_line():
    r = kmeans([0, 0.1, 10, 10.1], 2, seed=0)
    assert sorted(r.centroids.ravel().tolist()) == pytest.approx([0.05, 10.05])


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(1).normal(size=(7, 2))
    r = kmeans(pts, 7, seed=3)
    assert r.params["inertia"] == 0
    assert sorted(map(tuple, r.centroids)) == sorted(map(tuple, pts))


def test_kmeans_beats_random_assignments():
    rng = np.random.default_rng(5)
    pts = np.vstack([rng.normal(c, 0.5, size=(14, 2)) for c in (0, 4, 8)])[:40]
    best = kmeans(pts, 3, seed=0).params["inertia"]
    for _ in range(100):
        a = rng.integers(3, size=40)
        inertia = sum(((pts[a == j] - pts[a == j].mean(0)) ** 2).sum() for j in range(3) if (a == j).any())
        assert best <= inertia


def test_kmeans_validation():
    with pytest.raises(ConfigError):
        kmeans([0, 1], 3)


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    pts = np.random.default_rng(seed).normal(size=(30, 2))
    h = kmeans(pts, k, seed=seed).params["inertia_history"]
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))


def test_predict_nearest():
    r = ClusterResult(["a"], np.zeros(1, dtype=int), "kmeans", {}, np.array([[0.0], [2.0], [5.0]]))
    assert cluster.predict_nearest(r, [5.0]) == 2
    assert cluster.predict_nearest(r, [1.0]) == 0
    rng = np.random.default_rng(0)
    C = rng.normal(size=(6, 3))
    r = ClusterResult([], np.zeros(0, dtype=int), "kmeans", {}, C)
    for x in rng.normal(size=(50, 3)):
        d = [math.dist(x, c) for c in C]
        assert cluster.predict_nearest(r, x) == d.index(min(d))


def test_predict_nearest_needs_centroids():
    with pytest.raises(DataError):
        cluster.predict_nearest(dbscan([(0, 0)], 1, 1), [0, 0])


def test_homogeneity_extremes():
    assert homogeneity([0, 0, 1, 1], [5, 5, 3, 3]) == 1.0
    assert homogeneity([0, 0, 1, 1], [0, 0, 0, 0]) == 0.0
    assert homogeneity([2, 2, 2], [0, 1, 2]) == 1.0


def test_homogeneity_hand_case():
    h_c = math.log(2)
    h_ck = -(0.5 * math.log(2 / 3) + 0.25 * math.log(1 / 3))
    assert homogeneity([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(1 - h_ck / h_c, abs=1e-12)


def test_homogeneity_noise_is_a_cluster():
    assert homogeneity([0, 1, 0, 1], [-1, -1, 0, 1]) == pytest.approx(hand_homogeneity([0, 1, 0, 1], [-1, -1, 0, 1]))
    assert homogeneity([0, 1, 0, 1], [-1, -1, 0, 1]) < 1


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(-1, 4)), min_size=1, max_size=60))
def test_homogeneity_properties(pairs):
    t, p = [a for a, _ in pairs], [b for _, b in pairs]
    h = homogeneity(t, p)
    assert 0 <= h <= 1
    assert h == pytest.approx(hand_homogeneity(t, p), abs=1e-12)
    pure = all(len({a for a, b in pairs if b == k}) == 1 for k in set(p))
    assert (h == pytest.approx(1.0, abs=1e-12)) == pure


def test_silhouette_fixed_coordinates():
    s = cluster.silhouette([0, 1, 10, 12], [0, 0, 1, 1])
    expected = (10 / 11 + 9 / 10 + 7.5 / 9.5 + 9.5 / 11.5) / 4
    assert s == pytest.approx(expected, abs=1e-12)


def test_silhouette_far_blobs():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(50, 0.1, (20, 2))])
    assert cluster.silhouette(pts, [0] * 20 + [1] * 20) > 0.9


def test_silhouette_identical_points_and_singleton():
    assert cluster.silhouette([0, 0, 0, 5], [0, 0, 0, 1]) == pytest.approx(0.75)


def test_silhouette_needs_two_clusters():
    with pytest.raises(DataError):
        cluster.silhouette([0, 1, 2], [0, 0, -1])


def test_cluster_result_round_trip(tmp_path):
    r = kmeans(np.arange(12.0).reshape(6, 2), 2, job_ids=list("abcdef"))
    r.save(tmp_path / "c.json")
    back = ClusterResult.load(tmp_path / "c.json")
    assert back.label_map() == r.label_map()
    assert back.centroids.tobytes() == r.centroids.tobytes()


def _class_jobs(prefix, values_fn, n):
    profs = [JobProfile(f"{prefix}{i:02d}", 0, values_fn(i)) for i in range(n)]
    return profs


def _catalog(groups, min_class_size=3):
    profiles, labels = [], []
    for lab, profs in groups:
        profiles += profs
        labels += [lab] * len(profs)
    ids = [p.job_id for p in profiles]
    feats = (ids, np.vstack([extract_features(p).values for p in profiles]))
    result = ClusterResult(ids, np.array(labels), "dbscan", {})
    return build_catalog(result, profiles, feats, min_class_size=min_class_size)


def test_intensity_labels():
    flat_hi = _class_jobs("a", lambda i: np.full(40, 2000.0 + i), 4)
    flat_lo = _class_jobs("b", lambda i: np.full(40, 100.0 + i), 4)
    square = _class_jobs("c", lambda i: np.tile([1100.0, 1100, 500, 500], 10) + i, 4)
    square_hi = _class_jobs("d", lambda i: np.tile([1500.0, 1500, 900, 900], 10) + i, 4)
    cat = _catalog([(0, flat_hi), (1, flat_lo), (2, square), (3, square_hi)])
    assert [c.intensity_label for c in cat.classes] == ["CIH", "NCL", "ML", "MH"]


def test_rules_table():
    r = IntensityRules()
    assert r.label(2000, 0.0, 1.0) == "CIH"
    assert r.label(300, 0.0, 0.0) == "NCL"
    assert r.label(1200, 0.15, 0.0) == "MH"
    assert r.label(700, 0.5, 1.0) == "ML"


def test_catalog_residual_and_ids():
    big = _class_jobs("a", lambda i: np.full(20, 500.0 + i), 5)
    small = _class_jobs("b", lambda i: np.full(20, 900.0 + i), 2)
    other = _class_jobs("c", lambda i: np.full(20, 1500.0 + i), 3)
    noise = _class_jobs("n", lambda i: np.full(20, 10.0 + i), 2)
    cat = _catalog([(0, big), (1, small), (2, other), (-1, noise)])
    assert [c.class_id for c in cat.classes] == [0, 1]
    assert [c.source_cluster for c in cat.classes] == [0, 2]
    assert cat.residual == sorted(p.job_id for p in small + noise)
    assert cat.next_class_id == 2
    assert all(c.size >= 3 for c in cat.classes)


def test_catalog_round_trip(tmp_path):
    cat = _catalog([(0, _class_jobs("a", lambda i: np.full(20, 500.0 + i), 4))])
    cat.save(tmp_path / "cat.json")
    back = cluster.ClassCatalog.load(tmp_path / "cat.json")
    assert back.to_dict() == cat.to_dict()


def test_catalog_rejects_overlap():
    c = cluster.CatalogClass(0, ["a"], "a", [1.0], "CIH", 1.0, 0.0, 1.0)
    with pytest.raises(DataError):
        cluster.ClassCatalog([c, cluster.CatalogClass(1, ["a"], "a", [1.0], "CIH", 1.0, 0.0, 1.0)], [])


@given(st.lists(st.integers(-1, 4), min_size=1, max_size=40), st.integers(1, 6))
def test_catalog_partitions_jobs(labels, min_size):
    profs = [JobProfile(f"j{i:03d}", 0, np.full(8, 100.0 + i)) for i in range(len(labels))]
    ids = [p.job_id for p in profs]
    feats = (ids, np.vstack([extract_features(p).values for p in profs]))
    cat = build_catalog(ClusterResult(ids, np.array(labels), "dbscan", {}), profs, feats, min_class_size=min_size)
    members = [j for c in cat.classes for j in c.members]
    assert sorted(members + cat.residual) == ids
    assert len(set(members)) == len(members)
