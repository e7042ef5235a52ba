"""Slow, straight-line reference implementations used as test oracles."""

from fractions import Fraction
import math

RANGES = [(25, 50), (50, 100), (100, 200), (200, 300), (300, 400), (400, 500),
          (500, 700), (700, 1000), (1000, 1500), (1500, 2000), (2000, 3000)]


def naive_mean(values):
    # exact rational sum, rounded once, then one float division
    total = Fraction(0)
    for v in values:
        total += Fraction(v)
    return float(total) / len(values)


def naive_median(values):
    s = sorted(values)
    m = len(s) // 2
    if len(s) % 2 == 1:
        return s[m]
    return (s[m - 1] + s[m]) / 2


def naive_bins(n):
    lengths = [n // 4] * 4
    for b in range(n % 4):
        lengths[b] += 1
    bins, start = [], 0
    for length in lengths:
        bins.append(list(range(start, start + length)))
        start += length
    return bins


def naive_features(series):
    x = [float(v) for v in series]
    n = len(x)
    bins = naive_bins(n)
    out = []
    for b in bins:
        out.append(naive_mean([x[i] for i in b]))
    for b in bins:
        out.append(naive_median([x[i] for i in b]))
    for b in range(4):
        for lag in (1, 2):
            for direction in ("rise", "fall"):
                for lo, hi in RANGES:
                    count = 0
                    for t in range(n - lag):
                        if t not in bins[b]:
                            continue
                        delta = x[t + lag] - x[t]
                        if direction == "rise" and delta > 0 and lo <= delta < hi:
                            count += 1
                        if direction == "fall" and delta < 0 and lo <= -delta < hi:
                            count += 1
                    out.append(count / n)
    out.append(naive_mean(x))
    out.append(float(n))
    return out


def brute_dbscan(points, eps, min_pts):
    """O(n^2) DBSCAN: core points, union-find components over core pairs, and
    each border point joins the neighboring component whose first core index is
    smallest. Cluster ids follow first-core-index order."""
    n = len(points)

    def dist(i, j):
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(points[i], points[j])))

    nbrs = [[j for j in range(n) if dist(i, j) <= eps] for i in range(n)]
    core = [len(nbrs[i]) >= min_pts for i in range(n)]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        if core[i]:
            for j in nbrs[i]:
                if core[j]:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)

    # component root -> smallest core index in it
    first = {}
    for i in range(n):
        if core[i]:
            r = find(i)
            first[r] = min(first.get(r, i), i)
    order = sorted(first.values())
    cid = {find(i): k for k, i in enumerate(order)}

    labels = []
    for i in range(n):
        if core[i]:
            labels.append(cid[find(i)])
            continue
        owners = [cid[find(j)] for j in nbrs[i] if core[j]]
        labels.append(min(owners) if owners else -1)
    return labels


def hand_entropy(counts):
    n = sum(counts)
    return -sum(c / n * math.log(c / n) for c in counts if c)


def hand_homogeneity(true, pred):
    n = len(true)
    classes = sorted(set(true))
    clusters = sorted(set(pred))
    h_c = hand_entropy([true.count(c) for c in classes])
    if h_c == 0:
        return 1.0
    h_ck = 0.0
    for k in clusters:
        members = [true[i] for i in range(n) if pred[i] == k]
        for c in classes:
            nck = members.count(c)
            if nck:
                h_ck -= nck / n * math.log(nck / len(members))
    return 1.0 - h_ck / h_c
