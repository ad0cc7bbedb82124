"""Entropy maps, entropy histograms, primary-peak thresholding and the
slice-level aggregated uncertainty score."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import entr
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_prob_field
from .augment import AugmentationConfig, ensemble_predict, plan_for_slice
from .tensorio import write_tensor


def entropy_map(p: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy (nats) of a (C, H, W) probability field."""
    p = np.asarray(p, dtype=np.float64)
    return entr(p).sum(axis=0)


@dataclass(frozen=True)
class EntropyHistogram:
    counts: np.ndarray
    edges: np.ndarray
    densities: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.counts)

    def center(self, n: int) -> float:
        return 0.5 * (self.edges[n] + self.edges[n + 1])


def histogram(e: np.ndarray, num_classes: int, bins: int = 100) -> EntropyHistogram:
    """Uniform bins over [0, ln C]; a value on an interior edge goes to the upper bin."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    edges = np.linspace(0.0, math.log(num_classes), bins + 1)
    v = np.asarray(e, dtype=np.float64).ravel()
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return EntropyHistogram(counts, edges, counts / counts.sum())


@dataclass(frozen=True)
class PeakThreshold:
    threshold_entropy: float
    peak_bin: int
    delta_used: float
    fallback: bool


def primary_peak_threshold(h: EntropyHistogram, epsilon: float = 0.05) -> PeakThreshold:
    """Lowest-entropy flat local maximum of the density histogram.

    A bin n (interior) qualifies when |d[n+1] - d[n]| < delta and
    d[n+1] - 2 d[n] + d[n-1] < 0, with delta = epsilon * max |first difference|.
    Without a qualifying bin the global density maximum is used.
    """
    d = h.densities
    first = np.diff(d)
    second = d[2:] - 2.0 * d[1:-1] + d[:-2]
    delta = float(epsilon * np.max(np.abs(first)))
    interior = np.arange(1, len(d) - 1)
    ok = (np.abs(first[interior]) < delta) & (second < 0)
    if ok.any():
        n, fallback = int(interior[ok][0]), False
    else:
        n, fallback = int(np.argmax(d)), True
    return PeakThreshold(float(h.center(n)), n, delta, fallback)


@dataclass(frozen=True)
class SliceUncertainty:
    slice_id: str
    u: float
    threshold: PeakThreshold
    pixels_above: int
    mean_entropy: float = 0.0
    mean_max_prob: float = 1.0


def gaua(e: np.ndarray, t: PeakThreshold, slice_id: str = "") -> SliceUncertainty:
    """Mean entropy over pixels strictly above the peak threshold."""
    e = np.asarray(e, dtype=np.float64)
    above = e > t.threshold_entropy
    count = int(above.sum())
    # exact summation keeps the score independent of pixel order
    mean_all = math.fsum(e.ravel()) / e.size
    u = math.fsum(e[above]) / count if count else mean_all
    return SliceUncertainty(slice_id, u, t, count, mean_all)


def score_probability(p: np.ndarray, slice_id: str = "", bins: int = 100,
                      epsilon: float = 0.05) -> SliceUncertainty:
    p = check_prob_field(p)
    e = entropy_map(p)
    t = primary_peak_threshold(histogram(e, p.shape[0], bins), epsilon)
    rec = gaua(e, t, slice_id)
    return SliceUncertainty(rec.slice_id, rec.u, rec.threshold, rec.pixels_above,
                            rec.mean_entropy, float(p.max(axis=0).mean()))


class GAUAScorer(TransformerMixin, BaseEstimator):
    """Maps a stack of probability fields (N, C, H, W) to slice scores (N,)."""

    def __init__(self, bins=100, epsilon=0.05):
        self.bins = bins
        self.epsilon = epsilon

    def fit(self, X=None, y=None):
        return self

    def score_records(self, X, ids=None):
        X = np.asarray(X)
        ids = ids if ids is not None else [str(i) for i in range(len(X))]
        return [score_probability(p, sid, self.bins, self.epsilon) for p, sid in zip(X, ids)]

    def transform(self, X):
        return np.array([r.u for r in self.score_records(X)])


def score_dataset(model, manifest, aug_config: AugmentationConfig, aug_seed: int,
                  bins: int = 100, epsilon: float = 0.05, prob_dir=None):
    """Score every slice of a manifest; returns (records, probs) in manifest order.

    When ``prob_dir`` is given each ensemble probability field is written as
    ``<slice_id>.prob.ugts``.
    """
    records, probs = [], {}
    for s in manifest.slices:
        try:
            plan = plan_for_slice(aug_config, aug_seed, s.id)
            p = ensemble_predict(model, s.load_image(), plan)
            rec = score_probability(p, s.id, bins, epsilon)
        except Exception as exc:
            raise RuntimeError(f"scoring slice {s.id} failed: {exc}") from exc
        if prob_dir is not None:
            Path(prob_dir).mkdir(parents=True, exist_ok=True)
            write_tensor(Path(prob_dir) / f"{s.id}.prob.ugts", p)
        records.append(rec)
        probs[s.id] = p
    return records, probs


def write_scores_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice_id", "u", "threshold_entropy", "peak_bin", "fallback", "pixels_above"])
        for r in records:
            w.writerow([r.slice_id, repr(r.u), repr(r.threshold.threshold_entropy),
                        r.threshold.peak_bin, int(r.threshold.fallback), r.pixels_above])
