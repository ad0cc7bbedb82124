"""Command-line entry point: ``ugtst <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .adapt import run_ugtst, write_loss_trace
from .config import ConfigError, TrainConfig
from .experiments import prepare_domains
from .metrics import evaluate_cases, read_metrics_csv, write_metrics_csv
from .segmenter import Segmenter, load_model, save_model
from .select import extract_features, select
from .tensorio import load_manifest
from .uncertainty import score_dataset, write_scores_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _cfg(args, overrides=None) -> dict:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    return config_mod.resolve({**doc, **(overrides or {})}, seed=args.seed)


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_gen_synth(args) -> int:
    out = _out(args)
    seed = 0 if args.seed is None else args.seed
    domains = prepare_domains(seed, out, test_cases=args.test_cases, magnitude=args.magnitude)
    for name, m in domains.items():
        print(f"{name}: {len(m)} slices -> {out / name / 'manifest.json'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _cfg(args)
    out = _out(args)
    manifest = load_manifest(args.manifest)
    X = np.stack([s.load_image() for s in manifest.slices])
    y = np.stack([manifest.load_label(s.id) for s in manifest.slices])
    tc = TrainConfig.from_config(cfg, "source")
    model = Segmenter(num_classes=manifest.num_classes, **tc.estimator_params()).fit(X, y)
    save_model(out / "source.model", model)
    write_loss_trace(out / "loss.csv", model.loss_trace_)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    trace = model.loss_trace_
    print(f"loss {trace[0]['loss']:.4f} -> {trace[-1]['loss']:.4f}; model {out / 'source.model'}")
    return 0


def cmd_select(args) -> int:
    overrides = {}
    for key, value in (("select.budget_fraction", args.budget),
                       ("select.capacity_multiplier", args.capacity_mult),
                       ("select.strategy", args.strategy)):
        if value is not None:
            overrides[key] = value
    cfg = _cfg(args, overrides)
    out = _out(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model, manifest.num_classes)
    records, _ = score_dataset(model, manifest, config_mod.aug_config(cfg), int(cfg["aug.seed"]),
                               int(cfg["unc.bins"]), float(cfg["unc.epsilon"]))
    sel_cfg = config_mod.selection_config(cfg)
    features = None
    if sel_cfg.strategy in ("ugtst", "centroid"):
        features = extract_features(model, manifest.slices)
    partition = select(records, features, sel_cfg)
    write_scores_csv(out / "scores.csv", records)
    partition.write_csv(out / "selection.csv")
    print(f"selected {partition.m} of {len(manifest)} slices ({sel_cfg.strategy}, "
          f"capacity {partition.n_tu}): {' '.join(partition.d_ta)}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _cfg(args)
    out = _out(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.source_model, manifest.num_classes)
    result = run_ugtst(model, manifest, cfg, out)
    print(f"labels read: {result.report['label_access_count']}; models in {out}")
    if args.eval_manifest:
        test = load_manifest(args.eval_manifest)
        rows = evaluate_cases(result.m_t2, test, config_mod.aug_config(cfg),
                              int(cfg["aug.seed"]), tta=bool(cfg["eval.tta"]))
        write_metrics_csv(out / "metrics.csv", rows)
        print(f"mean dsc {np.mean([r.dsc for r in rows]):.4f} -> {out / 'metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _cfg(args)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model, manifest.num_classes)
    rows = evaluate_cases(model, manifest, config_mod.aug_config(cfg), int(cfg["aug.seed"]),
                          tta=not args.no_tta and bool(cfg["eval.tta"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    print(f"{len(rows)} cases, mean dsc {np.mean([r.dsc for r in rows]):.4f} -> {out}")
    return 0


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def collect_runs(run_dirs) -> list:
    """One row per run directory holding report.json and metrics.csv."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        try:
            report = json.loads((d / "report.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RuntimeError(f"{d}: cannot read report.json: {exc}") from exc
        metrics = read_metrics_csv(d / "metrics.csv")
        if not metrics:
            raise RuntimeError(f"{d}: metrics.csv has no rows")
        rows.append({
            "run": str(d),
            "strategy": report["strategy"],
            "capacity_multiplier": int(report["config"]["select.capacity_multiplier"]),
            "n_tu": int(report["n_tu"]),
            "m": int(report["m"]),
            "seed": int(report["config"]["master_seed"]),
            "dsc": float(np.mean([r.dsc for r in metrics])),
            "hd95": float(np.mean([r.hd95 for r in metrics])),
        })
    rows.sort(key=lambda r: (r["strategy"], r["capacity_multiplier"], r["seed"], r["run"]))
    return rows


def summarize(rows) -> list:
    groups = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["capacity_multiplier"]), []).append(r)
    out = []
    for (strategy, mult), group in sorted(groups.items()):
        dsc_mean, dsc_std = _mean_std([r["dsc"] for r in group])
        hd_mean, hd_std = _mean_std([r["hd95"] for r in group])
        out.append({"strategy": strategy, "capacity_multiplier": mult, "n": len(group),
                    "dsc_mean": dsc_mean, "dsc_std": dsc_std,
                    "hd95_mean": hd_mean, "hd95_std": hd_std})
    return out


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory")
    out = _out(args)
    rows = collect_runs(args.runs)
    summary = summarize(rows)
    _write_rows(out / "runs.csv", rows)
    _write_rows(out / "comparison.csv", summary)
    for s in summary:
        print(f"{s['strategy']:>16} x{s['capacity_multiplier']}: n={s['n']} "
              f"dsc {s['dsc_mean']:.4f} +- {s['dsc_std']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of flat config overrides")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (a file path for evaluate)")

    parser = _Parser(prog="ugtst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic domain pair")
    p.add_argument("--preset", choices=["shift-pair"], default="shift-pair")
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--test-cases", type=int, default=4,
                   help="cases per held-out test split (0 for none)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("select", parents=[common], help="score and select slices to annotate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--budget", type=float, help="annotation budget as a fraction of slices")
    p.add_argument("--capacity-mult", type=int)
    p.add_argument("--strategy")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("adapt", parents=[common], help="select, annotate and self-train")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source-model", required=True)
    p.add_argument("--eval-manifest", help="labeled test manifest; writes metrics.csv")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", parents=[common], help="case-level DSC and HD95")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--no-tta", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="aggregate run directories")
    p.add_argument("runs", nargs="*")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
