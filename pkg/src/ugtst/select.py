"""Uncertainty partition, diversity-aware selection and baseline selectors."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

STRATEGIES = ("ugtst", "random", "least_confidence", "mean_entropy", "centroid")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    budget_fraction: float = 0.05
    capacity_multiplier: int = 4
    seed: int = 0
    strategy: str = "ugtst"

    def __post_init__(self):
        if not 0.0 < self.budget_fraction <= 1.0:
            raise SelectionError(f"budget_fraction must lie in (0, 1], got {self.budget_fraction}")
        if self.capacity_multiplier < 1:
            raise SelectionError("capacity_multiplier must be >= 1")
        if self.strategy not in STRATEGIES:
            raise SelectionError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")

    def budget(self, n_total: int) -> int:
        # round half up
        return max(1, int(math.floor(self.budget_fraction * n_total + 0.5)))

    def capacity(self, n_total: int) -> int:
        return min(n_total, self.capacity_multiplier * self.budget(n_total))


def partition_by_uncertainty(ids, scores, n_tu: int):
    """Top ``n_tu`` slices by score (ties by ascending id) and the complement.

    ``d_tu`` is returned in rank order, ``d_ts`` in input order.
    """
    ids = list(ids)
    scores = [float(s) for s in scores]
    if not ids:
        raise SelectionError("no slices to partition")
    if not 1 <= n_tu <= len(ids):
        raise SelectionError(f"capacity {n_tu} outside [1, {len(ids)}]")
    ranked = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    top = {ids[i] for i in ranked[:n_tu]}
    d_tu = [ids[i] for i in ranked[:n_tu]]
    d_ts = [sid for sid in ids if sid not in top]
    return d_tu, d_ts


def _sq_dists(X, centers):
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


class KMeansPlusPlus(ClusterMixin, BaseEstimator):
    """k-means with k-means++ seeding and plain Lloyd iterations.

    Iterates until the assignment is unchanged or ``max_iter`` is reached.
    An empty cluster is re-seeded with the point farthest from its centroid.
    """

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def _seed_centers(self, X, rng):
        n = len(X)
        chosen = [int(rng.integers(n))]
        d2 = _sq_dists(X, X[chosen]).min(axis=1)
        while len(chosen) < self.n_clusters:
            total = d2.sum()
            if total > 0:
                nxt = int(rng.choice(n, p=d2 / total))
            else:
                rest = [i for i in range(n) if i not in chosen]
                nxt = int(rest[rng.integers(len(rest))])
            chosen.append(nxt)
            d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
        return X[chosen].copy()

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not 1 <= self.n_clusters <= len(X):
            raise SelectionError(f"cannot form {self.n_clusters} clusters from {len(X)} points")
        rng = np.random.default_rng(self.random_state)
        centers = self._seed_centers(X, rng)
        labels = None
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            new = _sq_dists(X, centers).argmin(axis=1)
            for k in range(self.n_clusters):
                if not np.any(new == k):
                    own = ((X - centers[new]) ** 2).sum(axis=1)
                    # never steal the last member of another cluster
                    sizes = np.bincount(new, minlength=self.n_clusters)
                    own[sizes[new] <= 1] = -1.0
                    new[int(np.argmax(own))] = k
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            centers = np.stack([X[labels == k].mean(axis=0) for k in range(self.n_clusters)])
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.n_iter_ = n_iter
        self.inertia_ = float(((X - centers[labels]) ** 2).sum())
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_).argmin(axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.sqrt(_sq_dists(X, self.cluster_centers_))


def kmeanspp_select(ids, features, m: int, seed: int):
    """Cluster the candidates into ``m`` groups and take the one nearest each centroid.

    Returns ``(selected_ids, audit)`` where audit maps each candidate id to
    ``(cluster_id, distance_to_own_centroid)``.
    """
    ids = list(ids)
    if not 1 <= m <= len(ids):
        raise SelectionError(f"need 1 <= M <= {len(ids)} candidates, got M={m}")
    X = np.asarray([features[sid] for sid in ids], dtype=np.float64)
    km = KMeansPlusPlus(n_clusters=m, random_state=seed).fit(X)
    d2 = _sq_dists(X, km.cluster_centers_)
    picked: list = []
    taken: set = set()
    for k in range(m):
        for i in sorted(range(len(ids)), key=lambda i: (d2[i, k], ids[i])):
            if ids[i] not in taken:
                picked.append(ids[i])
                taken.add(ids[i])
                break
    audit = {sid: (int(km.labels_[i]), float(math.sqrt(d2[i, km.labels_[i]])))
             for i, sid in enumerate(ids)}
    return picked, audit


@dataclass(frozen=True)
class SliceRecord:
    u: float
    set: str
    cluster_id: Optional[int] = None
    distance_to_centroid: Optional[float] = None


@dataclass(frozen=True)
class SelectionPartition:
    d_ta: tuple
    d_tu: tuple
    d_ts: tuple
    records: dict = field(default_factory=dict)
    strategy: str = "ugtst"
    seed: int = 0
    m: int = 0
    n_tu: int = 0

    @property
    def unlabeled(self) -> tuple:
        ta = set(self.d_ta)
        return tuple(sid for sid in self.records if sid not in ta)

    def check(self) -> None:
        ta, tu, ts = set(self.d_ta), set(self.d_tu), set(self.d_ts)
        assert len(ta) == len(self.d_ta) == self.m
        assert ta <= tu and not (tu & ts)
        assert tu | ts == set(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice_id", "u", "set", "cluster_id", "distance_to_centroid",
                        "strategy", "seed"])
            for sid, r in self.records.items():
                w.writerow([sid, repr(r.u), r.set,
                            "" if r.cluster_id is None else r.cluster_id,
                            "" if r.distance_to_centroid is None else repr(r.distance_to_centroid),
                            self.strategy, self.seed])


def select(scores, features, cfg: SelectionConfig) -> SelectionPartition:
    """Partition by uncertainty, then pick the annotation set by ``cfg.strategy``.

    ``scores`` are SliceUncertainty records in manifest order; ``features``
    maps slice id to its pooled encoder vector (needed by ugtst and centroid).
    Baselines pick from all slices; their candidate set is the picked slices
    topped up with the most uncertain remaining slices to the same capacity.
    """
    ids = [r.slice_id for r in scores]
    u = {r.slice_id: r.u for r in scores}
    m, n_tu = cfg.budget(len(ids)), cfg.capacity(len(ids))
    audit: dict = {}

    if cfg.strategy == "ugtst":
        d_tu, _ = partition_by_uncertainty(ids, [u[i] for i in ids], n_tu)
        d_ta, audit = kmeanspp_select(d_tu, features, m, cfg.seed)
    else:
        if cfg.strategy == "random":
            rng = np.random.default_rng(cfg.seed)
            d_ta = [ids[i] for i in sorted(rng.choice(len(ids), size=m, replace=False))]
        elif cfg.strategy == "least_confidence":
            conf = {r.slice_id: r.mean_max_prob for r in scores}
            d_ta = sorted(ids, key=lambda s: (conf[s], s))[:m]
        elif cfg.strategy == "mean_entropy":
            ent = {r.slice_id: r.mean_entropy for r in scores}
            d_ta = sorted(ids, key=lambda s: (-ent[s], s))[:m]
        else:
            d_ta, audit = kmeanspp_select(ids, features, m, cfg.seed)
        rest = [s for s in ids if s not in set(d_ta)]
        fill, _ = partition_by_uncertainty(rest, [u[s] for s in rest], n_tu - m) \
            if n_tu > m else ([], rest)
        d_tu = list(d_ta) + fill

    ta, tu = set(d_ta), set(d_tu)
    d_ts = [s for s in ids if s not in tu]
    records = {}
    for sid in ids:
        kind = "ta" if sid in ta else ("tu" if sid in tu else "ts")
        cid, dist = audit.get(sid, (None, None))
        records[sid] = SliceRecord(u[sid], kind, cid, dist)
    part = SelectionPartition(tuple(d_ta), tuple(d_tu), tuple(d_ts), records,
                              cfg.strategy, cfg.seed, m, n_tu)
    part.check()
    return part


def extract_features(model, slices) -> dict:
    """Pooled deepest-encoder features for each slice, keyed by slice id."""
    out = {}
    for s in slices:
        out[s.id] = model.transform(s.load_image()[None])[0]
    return out
