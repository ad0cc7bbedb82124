"""Tiered self-training: active labels plus stable-set pseudo-labels, then
pseudo-label regeneration and training on the full target set."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .augment import AugmentationConfig, ensemble_predict, plan_for_slice
from .config import TrainConfig
from .segmenter import Segmenter, save_model
from .select import SelectionPartition, select
from .tensorio import DatasetManifest, write_tensor
from .uncertainty import score_dataset, write_scores_csv


class AdaptationError(RuntimeError):
    pass


class LabelOracle:
    """Reveals ground-truth labels from a manifest and counts every access."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.accessed: list = []

    @property
    def count(self) -> int:
        return len(self.accessed)

    def reveal(self, slice_id: str) -> np.ndarray:
        self.accessed.append(slice_id)
        return self.manifest.load_label(slice_id)


@dataclass(frozen=True)
class PseudoLabel:
    hard_label: np.ndarray
    source_model_tag: str
    generation_stage: str


def make_pseudo_labels(probs: dict, source_model_tag: str = "source",
                       generation_stage: str = "source") -> dict:
    """Per-pixel argmax of each probability field; ties go to the lowest class."""
    return {sid: PseudoLabel(np.asarray(p).argmax(axis=0).astype(np.uint8),
                             source_model_tag, generation_stage)
            for sid, p in probs.items()}


@dataclass
class AdaptationPlan:
    partition: SelectionPartition
    annotations: dict
    stage1_cfg: TrainConfig = field(default_factory=TrainConfig)
    stage2_cfg: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if set(self.annotations) != set(self.partition.d_ta):
            raise AdaptationError("annotations must cover exactly the selected slices")


def _train_from(init: Segmenter, ids, images, targets, weights, cfg: TrainConfig):
    model = Segmenter.from_params(init.params_, init.num_classes, warm_start=True,
                                  **cfg.estimator_params())
    X = np.stack([images[i] for i in ids])
    y = np.stack([targets[i] for i in ids])
    model.fit(X, y, sample_weight=np.asarray([weights[i] for i in ids]))
    model.training_ids_ = tuple(ids)
    return model


def _ordered(manifest, ids):
    wanted = set(ids)
    return [s.id for s in manifest.slices if s.id in wanted]


def _images(manifest, images):
    return images if images is not None else {s.id: s.load_image() for s in manifest.slices}


def stage1(source_model, plan: AdaptationPlan, pseudo: dict, manifest, images=None):
    """Train from the source weights on the active set (true labels) and the
    stable set (source pseudo-labels); uncertain unselected slices are left out."""
    part = plan.partition
    missing = [sid for sid in part.d_ts if sid not in pseudo]
    if missing:
        raise AdaptationError(f"missing pseudo-labels for stable slices {missing}")
    images = _images(manifest, images)
    ids = _ordered(manifest, list(part.d_ta) + list(part.d_ts))
    targets = {**{sid: pseudo[sid].hard_label for sid in part.d_ts}, **plan.annotations}
    weights = {sid: (plan.stage1_cfg.active_weight if sid in plan.annotations else 1.0)
               for sid in ids}
    return _train_from(source_model, ids, images, targets, weights, plan.stage1_cfg)


def regenerate(m_t1, manifest, plan: AdaptationPlan, aug_config: AugmentationConfig,
               aug_seed: int, images=None) -> dict:
    """Ensemble pseudo-labels from the stage-1 model for every unannotated slice."""
    images = _images(manifest, images)
    labeled = set(plan.partition.d_ta)
    probs = {s.id: ensemble_predict(m_t1, images[s.id], plan_for_slice(aug_config, aug_seed, s.id))
             for s in manifest.slices if s.id not in labeled}
    return make_pseudo_labels(probs, "stage1", "stage1")


def stage2(m_t1, plan: AdaptationPlan, regenerated: dict, manifest, images=None):
    """Continue from the stage-1 weights on every target slice."""
    images = _images(manifest, images)
    gap = [s.id for s in manifest.slices
           if s.id not in plan.annotations and s.id not in regenerated]
    if gap:
        raise AdaptationError(f"no label or pseudo-label for slices {gap}")
    ids = [s.id for s in manifest.slices]
    targets = {**{sid: pl.hard_label for sid, pl in regenerated.items()}, **plan.annotations}
    weights = {sid: (plan.stage2_cfg.active_weight if sid in plan.annotations else 1.0)
               for sid in ids}
    return _train_from(m_t1, ids, images, targets, weights, plan.stage2_cfg)


@dataclass
class AdaptationResult:
    m_t1: Segmenter
    m_t2: Segmenter
    partition: SelectionPartition
    report: dict
    oracle: LabelOracle = None


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for row in trace:
            w.writerow([row["step"], row["epoch"], repr(row["lr"]), repr(row["loss"])])


def run_ugtst(source_model, manifest, cfg: dict = None, out_dir=None) -> AdaptationResult:
    """Score, select, annotate the selection, then run both self-training stages.

    ``cfg`` is a resolved flat config (see ``ugtst.config``). Every intermediate
    artifact is written under ``out_dir`` when it is given.
    """
    cfg = config_mod.resolve(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    aug_cfg = config_mod.aug_config(cfg)
    aug_seed = int(cfg["aug.seed"])
    sel_cfg = config_mod.selection_config(cfg)
    s1_cfg = TrainConfig.from_config(cfg, "stage1")
    s2_cfg = TrainConfig.from_config(cfg, "stage2")

    stage = "scoring"
    try:
        images = {s.id: s.load_image() for s in manifest.slices}
        records, probs = score_dataset(source_model, manifest, aug_cfg, aug_seed,
                                       int(cfg["unc.bins"]), float(cfg["unc.epsilon"]),
                                       prob_dir=None if out is None else out / "probs")
        stage = "selection"
        features = None
        if sel_cfg.strategy in ("ugtst", "centroid"):
            features = {sid: source_model.transform(images[sid][None])[0] for sid in images}
        partition = select(records, features, sel_cfg)

        stage = "annotation"
        oracle = LabelOracle(manifest)
        annotations = {sid: oracle.reveal(sid) for sid in partition.d_ta}
        plan = AdaptationPlan(partition, annotations, s1_cfg, s2_cfg)

        stage = "stage1"
        pseudo0 = make_pseudo_labels({sid: probs[sid] for sid in partition.d_ts})
        m_t1 = stage1(source_model, plan, pseudo0, manifest, images)

        stage = "regenerate"
        regen = regenerate(m_t1, manifest, plan, aug_cfg, aug_seed, images)

        stage = "stage2"
        m_t2 = stage2(m_t1, plan, regen, manifest, images)
    except Exception as exc:
        raise AdaptationError(f"{stage} failed: {exc}") from exc

    report = {
        "config": cfg,
        "manifest": manifest.name,
        "n_t": len(manifest),
        "m": partition.m,
        "n_tu": partition.n_tu,
        "strategy": partition.strategy,
        "d_ta": list(partition.d_ta),
        "sizes": {"ta": len(partition.d_ta), "tu": len(partition.d_tu),
                  "ts": len(partition.d_ts)},
        "stage1_train_size": len(m_t1.training_ids_),
        "stage2_train_size": len(m_t2.training_ids_),
        "pseudo_stage1_count": len(regen),
        "label_access_count": oracle.count,
        "labels_read": list(oracle.accessed),
        "stage1_final_loss": m_t1.loss_trace_[-1]["loss"],
        "stage2_final_loss": m_t2.loss_trace_[-1]["loss"],
    }

    if out is not None:
        write_scores_csv(out / "scores.csv", records)
        partition.write_csv(out / "selection.csv")
        save_model(out / "stage1.model", m_t1)
        save_model(out / "stage2.model", m_t2)
        write_loss_trace(out / "stage1_loss.csv", m_t1.loss_trace_)
        write_loss_trace(out / "stage2_loss.csv", m_t2.loss_trace_)
        pdir = out / "pseudo_stage1"
        pdir.mkdir(exist_ok=True)
        for sid, pl in regen.items():
            write_tensor(pdir / f"{sid}.label.ugts", pl.hard_label)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return AdaptationResult(m_t1, m_t2, partition, report, oracle)
