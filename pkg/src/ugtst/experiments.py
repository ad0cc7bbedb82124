"""Multi-seed synthetic domain-shift experiments."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .adapt import run_ugtst
from .config import TrainConfig
from .metrics import evaluate_cases, write_metrics_csv
from .segmenter import Segmenter, save_model
from .synthdata import DomainSpec, default_shift_pair, generate

TEST_SEED_OFFSET = 10_000


def prepare_domains(seed: int, root, base: DomainSpec = None, test_cases: int = 4,
                    magnitude: float = 1.0) -> dict:
    """Generate source/target training sets and held-out test sets under ``root``."""
    root = Path(root)
    src, tgt = default_shift_pair(seed, magnitude, base)
    out = {
        "source": generate(src, root / "source", "source"),
        "target": generate(tgt, root / "target", "target"),
    }
    if test_cases < 1:
        return out
    test_src = replace(src, seed=seed + TEST_SEED_OFFSET, num_cases=test_cases)
    test_tgt = replace(tgt, seed=seed + TEST_SEED_OFFSET, num_cases=test_cases)
    out["source_test"] = generate(test_src, root / "source_test", "source_test", "source")
    out["target_test"] = generate(test_tgt, root / "target_test", "target_test", "target")
    return out


def pretrain(manifest, cfg: dict) -> Segmenter:
    tc = TrainConfig.from_config(cfg, "source")
    X = np.stack([s.load_image() for s in manifest.slices])
    y = np.stack([manifest.load_label(s.id) for s in manifest.slices])
    return Segmenter(num_classes=manifest.num_classes, **tc.estimator_params()).fit(X, y)


def mean_dsc(model, manifest, cfg: dict) -> float:
    res = evaluate_cases(model, manifest, config_mod.aug_config(cfg), int(cfg["aug.seed"]),
                         tta=bool(cfg["eval.tta"]))
    return float(np.mean([r.dsc for r in res]))


def run_adaptation(source_model, domains: dict, cfg: dict, out_dir) -> dict:
    """One adaptation run plus held-out evaluation of both stages; writes metrics.csv."""
    out = Path(out_dir)
    result = run_ugtst(source_model, domains["target"], cfg, out)
    aug, aseed = config_mod.aug_config(cfg), int(cfg["aug.seed"])
    tta = bool(cfg["eval.tta"])
    ev1 = evaluate_cases(result.m_t1, domains["target_test"], aug, aseed, tta=tta)
    ev2 = evaluate_cases(result.m_t2, domains["target_test"], aug, aseed, tta=tta)
    write_metrics_csv(out / "metrics.csv", ev2)
    write_metrics_csv(out / "metrics_stage1.csv", ev1)
    return {
        "strategy": cfg["select.strategy"],
        "capacity_multiplier": int(cfg["select.capacity_multiplier"]),
        "m": result.partition.m,
        "n_tu": result.partition.n_tu,
        "stage1_dsc": float(np.mean([r.dsc for r in ev1])),
        "stage2_dsc": float(np.mean([r.dsc for r in ev2])),
        "label_access_count": result.report["label_access_count"],
    }


def domain_shift_experiment(seed: int, work_dir, strategies=("ugtst", "random"),
                            overrides: dict = None, capacities=None) -> dict:
    """Pretrain on source, then adapt to target with each strategy (and capacity)."""
    work = Path(work_dir)
    domains = prepare_domains(seed, work / "data")
    cfg = config_mod.resolve(overrides, seed=seed)
    source_model = pretrain(domains["source"], cfg)
    save_model(work / "source.model", source_model)
    summary = {
        "seed": seed,
        "source_dsc_on_source": mean_dsc(source_model, domains["source_test"], cfg),
        "source_dsc_on_target": mean_dsc(source_model, domains["target_test"], cfg),
        "runs": [],
    }
    for strategy in strategies:
        for mult in capacities or [cfg["select.capacity_multiplier"]]:
            run_cfg = config_mod.resolve({**(overrides or {}), "select.strategy": strategy,
                                          "select.capacity_multiplier": mult}, seed=seed)
            name = f"{strategy}_x{mult}"
            summary["runs"].append(run_adaptation(source_model, domains, run_cfg,
                                                  work / "runs" / name))
    (work / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
