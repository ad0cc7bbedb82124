"""Segmentation metrics: Dice, pooled HD95, largest-component filtering."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .augment import AugmentationConfig, ensemble_predict, plan_for_slice


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background face-neighbour; the array edge counts as background."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[core]
    return mask & ~interior


def hd95(pred, gt, return_flag: bool = False):
    """95th percentile of the pooled boundary-to-boundary distances (pixel units).

    If exactly one mask is empty the result is the array diagonal and the
    flag is set; two empty masks give 0.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() and not gt.any():
        value, flag = 0.0, False
    elif not pred.any() or not gt.any():
        value, flag = float(np.sqrt(sum(d * d for d in pred.shape))), True
    else:
        bp = np.argwhere(boundary(pred)).astype(np.float64)
        bg = np.argwhere(boundary(gt)).astype(np.float64)
        d_pg, _ = cKDTree(bg).query(bp)
        d_gp, _ = cKDTree(bp).query(bg)
        value, flag = float(np.percentile(np.concatenate([d_pg, d_gp]), 95)), False
    return (value, flag) if return_flag else value


def largest_component(mask) -> np.ndarray:
    """Keep the largest face-connected component (4-connectivity in 2D, 6 in 3D).

    Ties go to the component whose first pixel in raster order comes first.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    labels, _ = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


@dataclass(frozen=True)
class EvalResult:
    case_id: str
    dsc: float
    hd95: float
    hd95_is_sentinel: bool
    num_slices: int
    slice_dsc: tuple = field(default_factory=tuple)


def evaluate_cases(model, manifest, aug_config: AugmentationConfig = None, aug_seed: int = 0,
                   tta: bool = True, postprocess: bool = True):
    """Per-case 3D Dice and HD95 after stacking slice predictions."""
    aug_config = aug_config or AugmentationConfig()
    results = []
    for case_id, slices in sorted(manifest.cases().items()):
        slices = sorted(slices, key=lambda s: s.index_in_case)
        preds, gts = [], []
        for s in slices:
            if s.label is None:
                raise ValueError(f"evaluation slice {s.id} has no label")
            img = s.load_image()
            if tta:
                prob = ensemble_predict(model, img, plan_for_slice(aug_config, aug_seed, s.id))
            else:
                prob = model.predict_proba(img[None])[0]
            preds.append(prob.argmax(axis=0) > 0)
            gts.append(manifest.load_label(s.id) > 0)
        pred, gt = np.stack(preds), np.stack(gts)
        if postprocess:
            pred = largest_component(pred)
        value, flag = hd95(pred, gt, return_flag=True)
        results.append(EvalResult(case_id, dsc(pred, gt), value, flag, len(slices),
                                  tuple(dsc(p, g) for p, g in zip(pred, gt))))
    return results


def write_metrics_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dsc", "hd95", "hd95_is_sentinel", "num_slices"])
        for r in results:
            w.writerow([r.case_id, repr(r.dsc), repr(r.hd95), int(r.hd95_is_sentinel),
                        r.num_slices])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return [EvalResult(row["case_id"], float(row["dsc"]), float(row["hd95"]),
                           bool(int(row["hd95_is_sentinel"])), int(row["num_slices"]))
                for row in csv.DictReader(fh)]
