import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ugtst.segmenter import Segmenter, param_count
from ugtst.select import (KMeansPlusPlus, SelectionConfig, SelectionError, extract_features,
                          kmeanspp_select, partition_by_uncertainty, select)
from ugtst.uncertainty import PeakThreshold, SliceUncertainty

T = PeakThreshold(0.0, 0, 0.0, True)


def rec(sid, u, ent=0.0, conf=1.0):
    return SliceUncertainty(sid, u, T, 0, ent, conf)


def test_budget_arithmetic():
    cfg = SelectionConfig(budget_fraction=0.05, capacity_multiplier=4)
    assert cfg.budget(20) == 1 and cfg.capacity(20) == 4
    assert cfg.budget(64) == 3 and cfg.capacity(64) == 12
    assert cfg.budget(10) == 1  # 0.5 rounds up
    assert SelectionConfig(budget_fraction=1.0).capacity(7) == 7


def test_config_validation():
    with pytest.raises(SelectionError):
        SelectionConfig(strategy="bogus")
    with pytest.raises(SelectionError):
        SelectionConfig(budget_fraction=0.0)


def test_partition_sort_oracle():
    ids = ["a", "b", "c", "d"]
    u = [0.9, 0.5, 0.1, 0.7]
    d_tu, d_ts = partition_by_uncertainty(ids, u, 2)
    expected = sorted(ids, key=lambda i: -u[ids.index(i)])[:2]
    assert set(d_tu) == set(expected) == {"a", "d"}
    assert d_ts == ["b", "c"]


def test_partition_full_capacity():
    d_tu, d_ts = partition_by_uncertainty(["a", "b"], [0.1, 0.2], 2)
    assert d_ts == [] and set(d_tu) == {"a", "b"}


def test_partition_ties_by_id():
    d_tu, _ = partition_by_uncertainty(["z", "b", "m", "a"], [0.5] * 4, 2)
    assert d_tu == ["a", "b"]


def test_kmeans_single_cluster_nearest_mean():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(9, 3))
    feats = {f"s{i}": x for i, x in enumerate(X)}
    picked, _ = kmeanspp_select(list(feats), feats, 1, seed=3)
    mean = X.mean(axis=0)
    best = min(feats, key=lambda k: (((feats[k] - mean) ** 2).sum(), k))
    assert picked == [best]
    # same slice minimizes total squared distance to all features among candidates
    total = {k: sum(((feats[k] - x) ** 2).sum() for x in X) for k in feats}
    assert min(total, key=total.get) == best


def test_kmeans_m_equals_n():
    feats = {f"s{i}": np.array([float(i), 0.0]) for i in range(5)}
    picked, _ = kmeanspp_select(list(feats), feats, 5, seed=0)
    assert sorted(picked) == sorted(feats)


def blobs(m, per=4, seed=0, spread=0.01, dim=4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(m, dim))
    centers *= 100.0 / min(np.linalg.norm(a - b) for a, b in itertools.combinations(centers, 2))
    feats, member = {}, {}
    for b in range(m):
        for j in range(per):
            sid = f"b{b}_{j}"
            feats[sid] = centers[b] + rng.normal(scale=spread, size=dim)
            member[sid] = b
    return feats, member


@pytest.mark.parametrize("m", [2, 3, 5])
def test_kmeans_one_per_blob(m):
    for seed in range(5):
        feats, member = blobs(m, seed=seed)
        picked, _ = kmeanspp_select(sorted(feats), feats, m, seed=seed)
        assert len(picked) == m == len(set(picked))
        assert sorted(member[s] for s in picked) == list(range(m))


def test_kmeans_deterministic_and_duplicates():
    feats = {f"s{i}": np.zeros(3) for i in range(6)}
    a, _ = kmeanspp_select(sorted(feats), feats, 3, seed=1)
    b, _ = kmeanspp_select(sorted(feats), feats, 3, seed=1)
    assert a == b and len(set(a)) == 3


def test_kmeans_too_few_candidates():
    with pytest.raises(SelectionError):
        kmeanspp_select(["a"], {"a": np.zeros(2)}, 2, 0)


def test_kmeans_estimator_api():
    X = np.vstack([np.zeros((3, 2)), np.full((3, 2), 10.0)])
    km = KMeansPlusPlus(n_clusters=2, random_state=0).fit(X)
    assert set(km.labels_[:3]) != set(km.labels_[3:])
    assert km.predict(np.array([[9.0, 9.0]]))[0] == km.labels_[3]
    assert km.get_params()["n_clusters"] == 2
    assert km.n_iter_ <= 100


def _scores(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rec(f"s{i:02d}", float(rng.uniform()), float(rng.uniform()), float(rng.uniform()))
            for i in range(n)]


def _feats(scores, seed=0):
    rng = np.random.default_rng(seed)
    return {r.slice_id: rng.normal(size=4) for r in scores}


def test_random_deterministic():
    s = _scores(20)
    cfg = SelectionConfig(strategy="random", seed=5)
    assert select(s, None, cfg).d_ta == select(s, None, cfg).d_ta


def test_ugtst_capacity_equals_budget():
    s = _scores(20)
    part = select(s, _feats(s), SelectionConfig(capacity_multiplier=1))
    assert set(part.d_ta) == set(part.d_tu)


def test_least_confidence():
    s = [rec("a", 0.1, conf=0.99), rec("b", 0.1, conf=0.6), rec("c", 0.1, conf=0.8)]
    part = select(s, None, SelectionConfig(budget_fraction=0.3, strategy="least_confidence"))
    assert part.d_ta == ("b",)


def test_mean_entropy():
    s = [rec("a", 0.1, ent=0.2), rec("b", 0.1, ent=0.6), rec("c", 0.1, ent=0.4)]
    part = select(s, None, SelectionConfig(budget_fraction=0.3, strategy="mean_entropy"))
    assert part.d_ta == ("b",)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.sampled_from(["ugtst", "random", "least_confidence",
                                              "mean_entropy", "centroid"]),
       st.integers(0, 2 ** 31), st.floats(0.01, 1.0), st.integers(1, 8))
def test_partition_laws(n, strategy, seed, frac, mult):
    s = _scores(n, seed % 1000)
    cfg = SelectionConfig(budget_fraction=frac, capacity_multiplier=mult, seed=seed,
                          strategy=strategy)
    part = select(s, _feats(s, seed % 7), cfg)
    ta, tu, ts = set(part.d_ta), set(part.d_tu), set(part.d_ts)
    assert len(part.d_ta) == len(ta) == cfg.budget(n)
    assert ta <= tu and not tu & ts and tu | ts == {r.slice_id for r in s}
    assert len(tu) == cfg.capacity(n)
    if strategy == "ugtst":
        u = {r.slice_id: r.u for r in s}
        if ts:
            assert min(u[i] for i in ta) >= max(u[i] for i in ts)
            assert min(u[i] for i in tu) >= max(u[i] for i in ts)


def test_selection_csv(tmp_path):
    s = _scores(20)
    part = select(s, _feats(s), SelectionConfig(seed=3))
    part.write_csv(tmp_path / "sel.csv")
    lines = (tmp_path / "sel.csv").read_text().splitlines()
    assert lines[0] == "slice_id,u,set,cluster_id,distance_to_centroid,strategy,seed"
    assert sum(1 for ln in lines[1:] if ln.split(",")[2] == "ta") == part.m
    assert len(lines) == 21


class _S:
    def __init__(self, sid, img):
        self.id, self.img = sid, img

    def load_image(self):
        return self.img


def test_extract_features():
    zero = Segmenter.from_params(np.zeros(param_count(2)), 2)
    img = np.random.default_rng(0).uniform(size=(6, 6)).astype(np.float32)
    f = extract_features(zero, [_S("a", img), _S("b", img)])
    assert f["a"].shape == (16,) and not f["a"].any()
    from ugtst.segmenter import init_params
    m = Segmenter.from_params(init_params(2, 1), 2)
    f = extract_features(m, [_S("a", img), _S("b", img.copy())])
    assert f["a"].tobytes() == f["b"].tobytes()
    np.testing.assert_allclose(f["a"], m.encode(img[None])[0].mean(axis=(1, 2)))
