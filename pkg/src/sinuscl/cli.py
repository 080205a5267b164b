"""``sinuscl`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from . import svg
from .metrics import METRIC_NAMES, read_metrics_csv, read_pr_curve_csv
from .sampling import FoldPlan, plan_nested_kfold
from .trainer import (REGIMES, TrainConfig, export_embeddings, load_run, run_label_efficiency,
                      run_nested_cv, save_run, train, write_cv_outputs, write_efficiency_csv,
                      write_embeddings_csv)

log = logging.getLogger("sinuscl")


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""


def _default_seed() -> int:
    raw = os.environ.get("SINUSCL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SINUSCL_SEED must be an integer, got {raw!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _regime_list(text: str) -> List[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    bad = [r for r in out if r not in REGIMES]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"unknown regime(s) {bad}; choose from {', '.join(REGIMES)}")
    return out


# configuration ----------------------------------------------------------------

_FLAG_TO_FIELD = {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "tau": "tau",
                  "lam": "lam", "stage2_epochs": "stage2_epochs", "regime": "regime", "seed": "seed"}


def resolve_config(args) -> TrainConfig:
    """JSON file first, then any flag that was given; the seed falls back to SINUSCL_SEED."""
    merged = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                merged = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: not valid JSON ({e})") from None
        if not isinstance(merged, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    for flag, key in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "finetune", False):
        merged["finetune_stage2"] = True
    merged.setdefault("seed", _default_seed())
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _plan(samples, args, seed) -> FoldPlan:
    if getattr(args, "plan", None):
        return FoldPlan.read_csv(args.plan)
    labels = {s.sample_id: s.label for s in samples}
    groups = {s.sample_id: s.patient_id for s in samples} if args.group_by_patient else None
    try:
        return plan_nested_kfold(labels, seed, args.outer_k, args.inner_k, groups)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    rows = D.generate_corpus(args.out, args.patients, args.normal_ratio, seed, args.exclude)
    n1 = sum(r.label for r in rows)
    print(f"wrote {len(rows)} samples to {args.out}: {len(rows) - n1} normal, {n1} anomaly")
    return 0


def cmd_preprocess(args) -> int:
    head = D.read_volume(args.head)
    if head.shape != (D.HEAD_EXTENT,) * 3:
        raise UsageError(f"{args.head}: expected a {D.HEAD_EXTENT}^3 head volume, got {head.shape}")
    pid = args.patient_id or Path(args.head).stem
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    labels = {"left": args.left_label, "right": args.right_label}
    rows = []
    for s in D.preprocess_pipeline(head, labels, pid):
        rel = f"volumes/{s.sample_id}.vol"
        D.write_volume(s.volume, out / rel)
        rows.append(D.ManifestRow(pid, s.side, s.label, s.anomaly_kind, rel))
    D.write_manifest(rows, out / "manifest.csv")
    print(f"wrote {len(rows)} sinus volumes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = D.load_samples(args.manifest)
    plan = _plan(samples, args, cfg.seed)
    if not 0 <= args.fold < len(plan.outer):
        raise UsageError(f"--fold must lie in [0, {len(plan.outer)})")
    by_id = {s.sample_id: s for s in samples}
    fold = plan.outer[args.fold]
    test = [by_id[i] for i in fold.test]
    record = train([by_id[i] for i in fold.train_pool], test, cfg)
    save_run(record, args.out, test)
    r = record.report
    print(f"fold {args.fold}: auroc {r.auroc:.4f} auprc {r.auprc:.4f} accuracy {r.accuracy:.4f} "
          f"f1 {r.f1_weighted:.4f}")
    return 0


def cmd_kfold(args) -> int:
    cfg = resolve_config(args)
    samples = D.load_samples(args.manifest)
    plan = _plan(samples, args, cfg.seed)
    result = run_nested_cv(samples, cfg, plan, jobs=args.jobs, validate_inner=args.validate_inner)
    out = write_cv_outputs(result, args.out)
    plan.write_csv(out / "folds.csv")
    _write_json(cfg.to_dict(), out / "run.json")
    _print_table([r.values() for r in result.reports])
    return 0


def cmd_label_efficiency(args) -> int:
    cfg = resolve_config(args)
    samples = D.load_samples(args.manifest)
    plan = _plan(samples, args, cfg.seed)
    rows = run_label_efficiency(samples, cfg, plan, args.regimes, args.fractions, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_efficiency_csv(rows, out / "label_efficiency.csv")
    table = {}
    for r in rows:
        table.setdefault(r.regime, []).append((r.fraction, r.auprc_mean))
    (out / "label_efficiency.svg").write_text(svg.efficiency_chart(table))
    _write_json(cfg.to_dict(), out / "run.json")
    for r in rows:
        print(f"{r.regime:>9} {r.fraction:4.2f}  auprc {r.auprc_mean:.4f} ± {r.auprc_std:.4f}")
    return 0


def cmd_embed(args) -> int:
    cfg, params = load_run(args.run)
    samples = D.load_samples(args.manifest)
    rows = export_embeddings(params, cfg, samples)
    write_embeddings_csv(rows, args.out)
    print(f"wrote {len(rows)} embeddings to {args.out}")
    return 0


def _print_table(rows) -> None:
    """Per-fold values exactly as stored, then mean ± std over folds."""
    print("fold," + ",".join(METRIC_NAMES))
    for k, r in enumerate(rows):
        print(f"{k}," + ",".join(repr(float(r[m])) for m in METRIC_NAMES))
    print(f"{'metric':<12} mean ± std over {len(rows)} fold(s)")
    for m in METRIC_NAMES:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        sd = vals.std(ddof=1) if len(vals) > 1 else 0.0
        print(f"{m:<12} {vals.mean():.4f} ± {sd:.4f}")


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics_path = run / "metrics.csv"
    if not metrics_path.is_file():
        raise FileNotFoundError(f"missing metrics file: {metrics_path}")
    _print_table(read_metrics_csv(metrics_path))
    curves = {}
    if (run / "pr_curve.csv").is_file():
        curves["run"] = read_pr_curve_csv(run / "pr_curve.csv")
    for p in sorted(run.glob("pr_curve_fold*.csv")):
        curves[p.stem.replace("pr_curve_", "")] = read_pr_curve_csv(p)
    if not curves:
        raise FileNotFoundError(f"no PR-curve CSV in {run}")
    target = Path(args.svg) if args.svg else run / "pr_curve.svg"
    target.write_text(svg.pr_curve_chart(curves))
    print(f"PR curve written to {target}")
    return 0


# parser -------------------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser, regime_flag=True) -> None:
    p.add_argument("--manifest", required=True)
    if regime_flag:
        p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--finetune", action="store_true", help="train the encoder in stage 2")
    p.add_argument("--plan", help="fold plan CSV to use instead of planning from the seed")
    p.add_argument("--outer-k", type=int, default=5)
    p.add_argument("--inner-k", type=int, default=5)
    p.add_argument("--group-by-patient", action="store_true")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sinuscl", description="Supervised contrastive sinus volume classifier")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=199)
    p.add_argument("--normal-ratio", type=float, default=D.DEFAULT_NORMAL_RATIO)
    p.add_argument("--exclude", type=int, default=0, help="drop this many sinuses at random")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("preprocess", help="crop, flip, resize and normalise one head volume")
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patient-id")
    p.add_argument("--left-label", type=int, choices=(0, 1), default=0)
    p.add_argument("--right-label", type=int, choices=(0, 1), default=0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train one regime on one outer fold")
    _add_training_flags(p)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("kfold", help="nested cross-validation of one regime")
    _add_training_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--validate-inner", action="store_true")
    p.set_defaults(fn=cmd_kfold)

    p = sub.add_parser("label-efficiency", help="AUPRC against training fraction")
    _add_training_flags(p, regime_flag=False)
    p.add_argument("--regimes", type=_regime_list, default=["combined"])
    p.add_argument("--fractions", type=_float_list, default=[0.6, 0.8, 1.0])
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_label_efficiency)

    p = sub.add_parser("embed", help="export contrastive embeddings from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("report", help="print metrics and render the PR curve of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--svg")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad usage
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"sinuscl {args.command}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"sinuscl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
