"""Training regimes and the cross-validation / label-efficiency harnesses.

Regimes:

* ``ce`` / ``ce_aug``: cross-entropy through the classifier head, without or
  with augmentation.
* ``simclr``: class-prior InfoNCE on two-view batches, then a frozen-encoder
  classifier fit (stage 2).
* ``supcon``: supervised contrastive loss on single-view batches, then stage 2.
* ``combined``: supervised contrastive plus weighted cross-entropy, one stage.

Inference always goes through the classifier head.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import losses as L
from . import nn
from . import tensor as T
from .data import AugmentationPolicy, SinusSample, derive_seed
from .metrics import (MetricsReport, ScoredPredictions, aggregate_folds, evaluate, write_metrics_csv,
                      write_pr_curve_csv)
from .sampling import (BatchSpec, FoldPlan, make_balanced_batches, make_single_view_batch,
                       make_two_view_batch, subsample_training)

logger = logging.getLogger(__name__)

REGIMES = ("ce", "ce_aug", "simclr", "supcon", "combined")
TWO_STAGE = ("simclr", "supcon")


@dataclass
class TrainConfig:
    regime: str = "combined"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    tau: float = 0.1
    lam: float = 1.0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    stage2_epochs: int = 50
    finetune_stage2: bool = False
    sum_inside_log: bool = True
    eval_batch: int = 64

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and learning rate must be positive")
        if self.regime in TWO_STAGE and self.stage2_epochs < 0:
            raise ValueError("stage2_epochs must be non-negative")
        BatchSpec(self.batch_size)
        L.LossConfig(self.tau, self.lam)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        if isinstance(self.encoder, dict):
            self.encoder = nn.EncoderConfig.from_dict(self.encoder)

    def to_dict(self):
        return {
            "regime": self.regime, "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "tau": self.tau, "lam": self.lam,
            "augmentation": self.augmentation.to_dict(), "seed": self.seed,
            "encoder": self.encoder.to_dict(), "stage2_epochs": self.stage2_epochs,
            "finetune_stage2": self.finetune_stage2, "sum_inside_log": self.sum_inside_log,
            "eval_batch": self.eval_batch,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


@dataclass
class RunRecord:
    config: dict
    losses: List[Dict[str, float]]
    stage2_losses: List[Dict[str, float]]
    params: nn.Params
    seen_ids: set
    report: Optional[MetricsReport] = None
    predictions: Optional[ScoredPredictions] = None
    wall_clock: float = 0.0


class TrainingDiverged(FloatingPointError):
    pass


def _trainable(params, regime, stage):
    groups = nn.param_groups(params)
    if stage == 2:
        return groups["proj2"]
    if regime in ("ce", "ce_aug"):
        return groups["encoder"] + groups["proj2"]
    if regime in TWO_STAGE:
        return groups["encoder"] + groups["proj1"]
    return groups["encoder"] + groups["proj1"] + groups["proj2"]


def _batch_loss(params, cfg: TrainConfig, vb, loss_cfg):
    x = T.Tensor(vb.volumes)
    feats = nn.encode(params, x, cfg.encoder)
    terms = {}
    if cfg.regime in ("ce", "ce_aug"):
        loss = L.loss_ce(nn.project_classify(params, feats), vb.labels)
        terms["ce"] = loss.item()
    elif cfg.regime == "simclr":
        z = nn.project_contrastive(params, feats)
        loss = L.loss_simclr(z, L.ContrastiveBatchIndex(vb.labels, vb.pairs), loss_cfg)
        terms["simclr"] = loss.item()
    elif cfg.regime == "supcon":
        z = nn.project_contrastive(params, feats)
        loss = L.loss_supcon(z, L.ContrastiveBatchIndex(vb.labels), loss_cfg, cfg.sum_inside_log)
        terms["supcon"] = loss.item()
    else:
        z = nn.project_contrastive(params, feats)
        sc = L.loss_supcon(z, L.ContrastiveBatchIndex(vb.labels), loss_cfg, cfg.sum_inside_log)
        ce = L.loss_ce(nn.project_classify(params, feats), vb.labels)
        loss = sc + ce * cfg.lam
        terms["supcon"], terms["ce"] = sc.item(), ce.item()
    return loss, terms


def _check_finite(value, epoch, stage):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in stage {stage}, epoch {epoch}")


def _epoch_mean(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def _stage1(params, cfg: TrainConfig, samples: Dict[str, SinusSample], labels, seen):
    spec = BatchSpec(cfg.batch_size, two_view=cfg.regime == "simclr")
    loss_cfg = L.LossConfig(cfg.tau, cfg.lam)
    names = _trainable(params, cfg.regime, 1)
    state = nn.AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        rows = []
        for b, ids in enumerate(make_balanced_batches(labels, spec, cfg.seed, epoch)):
            batch = [samples[i] for i in ids]
            seen.update(ids)
            view_seed = (cfg.seed, epoch, b)
            if cfg.regime == "simclr":
                vb = make_two_view_batch(batch, cfg.augmentation, view_seed)
            elif cfg.regime == "ce_aug":
                vb = make_single_view_batch(batch, cfg.augmentation, view_seed)
            else:
                vb = make_single_view_batch(batch)
            loss, terms = _batch_loss(params, cfg, vb, loss_cfg)
            _check_finite(loss.item(), epoch, 1)
            nn.zero_grad(params)
            loss.backward()
            nn.adam_step(params, nn.collect_grads(params, names), state)
            rows.append({"loss": loss.item(), **terms})
        history.append(_epoch_mean(rows))
        logger.debug("epoch %d %s", epoch, history[-1])
    return history


def extract_features(params, config: TrainConfig, volumes: np.ndarray) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(volumes), config.eval_batch):
            x = T.Tensor(volumes[start:start + config.eval_batch])
            out.append(nn.encode(params, x, config.encoder).data)
    return np.concatenate(out)


def _stage2(params, cfg: TrainConfig, samples, labels, seen):
    """Fit the classifier head on a frozen (or, with finetune, trainable) encoder."""
    spec = BatchSpec(cfg.batch_size)
    state = nn.AdamState(lr=cfg.lr)
    ids = sorted(labels)
    row_of = {sid: k for k, sid in enumerate(ids)}
    feats = None
    if not cfg.finetune_stage2:
        feats = extract_features(params, cfg, np.stack([samples[i].volume.voxels for i in ids])[:, None])
    names = _trainable(params, cfg.regime, 2)
    if cfg.finetune_stage2:
        names = nn.param_groups(params)["encoder"] + names
    history = []
    for epoch in range(cfg.stage2_epochs):
        rows = []
        for batch_ids in make_balanced_batches(labels, spec, derive_seed(cfg.seed, "stage2"), epoch):
            seen.update(batch_ids)
            y = np.array([labels[i] for i in batch_ids])
            if feats is None:
                x = T.Tensor(np.stack([samples[i].volume.voxels for i in batch_ids])[:, None])
                f = nn.encode(params, x, cfg.encoder)
            else:
                f = T.Tensor(feats[[row_of[i] for i in batch_ids]])
            loss = L.loss_ce(nn.project_classify(params, f), y)
            _check_finite(loss.item(), epoch, 2)
            nn.zero_grad(params)
            loss.backward()
            nn.adam_step(params, nn.collect_grads(params, names), state)
            rows.append({"loss": loss.item(), "ce": loss.item()})
        history.append(_epoch_mean(rows))
    return history


def predict(params, config: TrainConfig, samples: Sequence[SinusSample]) -> ScoredPredictions:
    vols = np.stack([s.volume.voxels for s in samples])[:, None]
    feats = extract_features(params, config, vols)
    with T.no_grad():
        logits = nn.project_classify(params, T.Tensor(feats)).data
    return ScoredPredictions.from_scores([s.sample_id for s in samples], [s.label for s in samples],
                                         nn.anomaly_score(logits))


def train(train_samples: Sequence[SinusSample], val_samples: Optional[Sequence[SinusSample]],
          config: TrainConfig) -> RunRecord:
    """Run one regime end to end; evaluates on ``val_samples`` when given."""
    t0 = time.perf_counter()
    samples = {s.sample_id: s for s in train_samples}
    labels = {sid: s.label for sid, s in samples.items()}
    if len(set(labels.values())) < 2:
        raise ValueError("training set must contain both classes")
    params = nn.init_parameters(config.encoder, derive_seed(config.seed, "init"))
    seen: set = set()
    history = _stage1(params, config, samples, labels, seen)
    stage2 = _stage2(params, config, samples, labels, seen) if config.regime in TWO_STAGE else []
    record = RunRecord(config.to_dict(), history, stage2, params, seen)
    if val_samples:
        record.predictions = predict(params, config, val_samples)
        record.report = evaluate(record.predictions)
    record.wall_clock = time.perf_counter() - t0
    logger.info("trained %s in %.1fs", config.regime, record.wall_clock)
    return record


# embeddings ---------------------------------------------------------------------

def export_embeddings(params, config: TrainConfig, samples: Sequence[SinusSample]) -> List[list]:
    """Rows of (sample id, label, unit-norm contrastive embedding)."""
    vols = np.stack([s.volume.voxels for s in samples])[:, None]
    feats = extract_features(params, config, vols)
    with T.no_grad():
        z = nn.project_contrastive(params, T.Tensor(feats)).data
    return [[s.sample_id, s.label, *z[k].tolist()] for k, s in enumerate(samples)]


def write_embeddings_csv(rows, path) -> None:
    dim = len(rows[0]) - 2 if rows else nn.EMBED_DIM
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *(f"z{k}" for k in range(dim))])
        for r in rows:
            w.writerow([r[0], r[1], *(repr(float(v)) for v in r[2:])])


# run directories ------------------------------------------------------------------

def write_loss_csv(history, path) -> None:
    keys = sorted({k for row in history for k in row}, key=lambda k: (k != "loss", k))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *keys])
        for e, row in enumerate(history):
            w.writerow([e, *(repr(row[k]) if k in row else "" for k in keys)])


def save_run(record: RunRecord, out_dir, embed_samples: Optional[Sequence[SinusSample]] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.json", "w") as fh:
        json.dump(record.config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_loss_csv(record.losses, out / "loss.csv")
    if record.stage2_losses:
        write_loss_csv(record.stage2_losses, out / "loss_stage2.csv")
    nn.save_checkpoint(record.params, out / "checkpoint.sclm")
    if record.report is not None:
        write_metrics_csv([record.report], out / "metrics.csv")
        write_pr_curve_csv(record.report.pr_curve, out / "pr_curve.csv")
    if embed_samples:
        cfg = TrainConfig.from_dict(record.config)
        write_embeddings_csv(export_embeddings(record.params, cfg, embed_samples), out / "embeddings.csv")
    return out


def load_run(run_dir):
    run_dir = Path(run_dir)
    with open(run_dir / "run.json") as fh:
        config = TrainConfig.from_dict(json.load(fh))
    return config, nn.load_checkpoint(run_dir / "checkpoint.sclm")


# harnesses --------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    predictions: ScoredPredictions
    losses: List[Dict[str, float]]
    seen_ids: set
    test_ids: List[str]
    inner_reports: List[MetricsReport] = field(default_factory=list)


@dataclass
class CVResult:
    folds: List[FoldResult]
    aggregate: Dict[str, tuple]

    @property
    def reports(self) -> List[MetricsReport]:
        return [f.report for f in self.folds]


def _run_fold(args):
    fold, train_samples, test_samples, config, inner = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        limits = None
    else:
        limits = threadpool_limits(1)
    try:
        rec = train(train_samples, test_samples, config)
        inner_reports = []
        for tr, va in inner:
            inner_reports.append(train(tr, va, config).report)
    finally:
        if limits is not None:
            limits.unregister()
    test_ids = [s.sample_id for s in test_samples]
    leaked = rec.seen_ids.intersection(test_ids)
    if leaked:
        raise RuntimeError(f"fold {fold}: test ids reached the optimizer: {sorted(leaked)[:5]}")
    return FoldResult(fold, rec.report, rec.predictions, rec.losses, rec.seen_ids, test_ids, inner_reports)


def _map(fn, jobs, tasks):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def run_nested_cv(samples: Sequence[SinusSample], config: TrainConfig, plan: FoldPlan,
                  jobs: int = 1, validate_inner: bool = False,
                  train_fraction: float = 1.0) -> CVResult:
    """Train on each outer fold's non-test pool, evaluate once on its test set.

    ``validate_inner`` additionally trains on every inner split and reports the
    validation metrics (five extra runs per outer fold).
    """
    by_id = {s.sample_id: s for s in samples}
    tasks = []
    for o, fold in enumerate(plan.outer):
        pool = fold.train_pool
        if train_fraction < 1.0:
            pool = subsample_training({i: by_id[i].label for i in pool}, train_fraction,
                                      derive_seed(config.seed, "fraction", o))
        inner = []
        if validate_inner:
            inner = [([by_id[i] for i in sp.train], [by_id[i] for i in sp.val]) for sp in fold.inner]
        tasks.append((o, [by_id[i] for i in pool], [by_id[i] for i in fold.test], config, inner))
    folds = _map(_run_fold, jobs, tasks)
    return CVResult(folds, aggregate_folds([f.report for f in folds]))


def write_cv_outputs(result: CVResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.reports, out / "metrics.csv")
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std"])
        for m, (mu, sd) in result.aggregate.items():
            w.writerow([m, repr(mu), repr(sd)])
    for f in result.folds:
        write_pr_curve_csv(f.report.pr_curve, out / f"pr_curve_fold{f.fold}.csv")
        if f.inner_reports:
            write_metrics_csv(f.inner_reports, out / f"inner_metrics_fold{f.fold}.csv", label="inner_fold")
    return out


@dataclass
class EfficiencyRow:
    regime: str
    fraction: float
    auprc_mean: float
    auprc_std: float
    fold_auprc: List[float]
    test_ids: List[List[str]]


def run_label_efficiency(samples: Sequence[SinusSample], config: TrainConfig, plan: FoldPlan,
                         regimes: Sequence[str] = ("combined",), fractions: Sequence[float] = (0.6, 0.8, 1.0),
                         jobs: int = 1) -> List[EfficiencyRow]:
    """Cross-validated AUPRC per (regime, training fraction) over fixed test folds."""
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {f}")
    rows = []
    for regime in regimes:
        cfg = config.with_(regime=regime)
        for frac in fractions:
            res = run_nested_cv(samples, cfg, plan, jobs=jobs, train_fraction=frac)
            aps = [f.report.auprc for f in res.folds]
            mu, sd = res.aggregate["auprc"]
            rows.append(EfficiencyRow(regime, float(frac), mu, sd, aps, [f.test_ids for f in res.folds]))
    return rows


def write_efficiency_csv(rows: Sequence[EfficiencyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "fraction", "auprc_mean", "auprc_std"])
        for r in rows:
            w.writerow([r.regime, repr(r.fraction), repr(r.auprc_mean), repr(r.auprc_std)])
