"""Two-stage training (contrastive pretraining, supervised fine-tuning) and the variant matrix."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .configs import config_hash, from_dict, to_dict
from .data import DEFAULT_RATIOS, Dataset, SplitManifest, SyntheticConfig, generate_synthetic, split_by_patient
from .errors import ConfigError, DataError, NumericError
from .evaluation import MetricsReport, emit_reports, evaluate, roc_auc
from .hybrid import (
    FREEZE_POLICIES,
    EncoderConfig,
    HybridModel,
    ModelConfig,
    apply_update,
    checkpoint_dict,
    finetune_step,
    validate_checkpoint,
    _decode_array,
)
from .seeding import rng_for
from .ssl import AugmentationConfig, make_views, ntxent_loss
from .tensorcore import AdamState

log = logging.getLogger(__name__)

VARIANTS = {
    "ssl_quantum": {"ssl": True, "quantum": True},
    "ssl_only": {"ssl": True, "quantum": False},
    "supervised_only": {"ssl": False, "quantum": False},
    "supervised_quantum": {"ssl": False, "quantum": True},
    "simple_baseline": {"ssl": False, "quantum": False, "simple": True},
}


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0:
            raise ConfigError("pretrain: need epochs >= 0, batch_size >= 2, lr > 0")


@dataclass
class FinetuneConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    freeze_policy: str = "last-block-unfrozen"
    # randomly initialised encoders have nothing worth freezing
    supervised_freeze_policy: str = "all-unfrozen"
    patience: int = 10

    def __post_init__(self):
        for p in (self.freeze_policy, self.supervised_freeze_policy):
            if p not in FREEZE_POLICIES:
                raise ConfigError(f"finetune: unknown freeze policy {p!r}")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0 or self.patience < 1:
            raise ConfigError("finetune: need epochs >= 0, batch_size >= 2, lr > 0, patience >= 1")


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    split_ratios: tuple = DEFAULT_RATIOS
    max_labeled_ratio: float = 0.2
    model: ModelConfig = field(default_factory=ModelConfig)
    baseline_encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(blocks=((8, 2), (16, 2)), style="simple"))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    variants: tuple = tuple(VARIANTS)
    seed: int = 0
    seeds: tuple = ()

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.split_ratios = tuple(self.split_ratios)
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
        if not self.variants:
            raise ConfigError("at least one variant is required")

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "config")

    def to_dict(self):
        return to_dict(self)

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def run_seeds(self):
        return self.seeds or (self.seed,)


def variant_model_config(cfg: ExperimentConfig, variant: str) -> ModelConfig:
    spec = VARIANTS[variant]
    m = cfg.model
    encoder = cfg.baseline_encoder if spec.get("simple") else m.encoder
    quantum = replace(m.quantum, enabled=spec["quantum"])
    return replace(m, encoder=encoder, quantum=quantum)


def pretrain_model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return replace(m, quantum=replace(m.quantum, enabled=m.quantum.in_pretrain))


@dataclass
class RunRecord:
    variant: str
    seed: int
    config_hash: str
    num_parameters: int
    pretrain_losses: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    epochs_configured: int = 0
    epochs_run: int = 0
    best_epoch: int = -1
    early_stopped: bool = False
    test: MetricsReport = None
    # kept out of serialised records so re-runs stay byte-identical
    wall_clock: float = 0.0

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "variant", "seed", "config_hash", "num_parameters", "pretrain_losses", "train_losses",
            "val_accuracy", "val_auc", "epochs_configured", "epochs_run", "best_epoch", "early_stopped")}
        d["test"] = self.test.to_dict() if self.test is not None else None
        return d


def _emit(progress, event, **fields):
    if progress is not None:
        progress({"event": event, **fields})


def _batches(order, size):
    """Consecutive batches; a trailing singleton joins the previous batch (batchnorm needs >= 2)."""
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def pretrain(cfg: ExperimentConfig, unlabeled: Dataset, seed: int, progress=None):
    """Contrastive pretraining of encoder + projection head.

    Only a label-stripped copy of ``unlabeled`` is used.  Returns
    ``(checkpoint dict, per-epoch losses)``.
    """
    data = unlabeled.strip_labels()
    if len(data) < 2:
        raise DataError(f"pretraining needs at least 2 unlabeled samples, got {len(data)}")
    pc = cfg.pretrain
    model = HybridModel(pretrain_model_config(cfg), seed)
    opt = AdamState(lr=pc.lr)
    tau = cfg.model.contrastive.temperature
    images = data.images()
    n = len(images)
    losses = []
    for epoch in range(pc.epochs):
        order = rng_for(seed, "pretrain", "shuffle", epoch).permutation(n)
        total, count = 0.0, 0
        for batch in _batches(order, pc.batch_size):
            views = []
            for idx in batch:
                v1, v2, _, _ = make_views(images[idx], pc.augmentation, rng_for(seed, "augment", int(idx), epoch))
                views += [v1, v2]
            model.set_mode(True, "pretrain")
            model.zero_grad()
            z = model.embed(np.stack(views))
            loss, dz = ntxent_loss(z, tau)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite contrastive loss in epoch {epoch}")
            model.embed_backward(dz)
            apply_update(model.trainable("pretrain"), opt)
            model.step += 1
            total += loss * len(batch)
            count += len(batch)
        losses.append(total / count)
        _emit(progress, "pretrain_epoch", seed=seed, epoch=epoch, loss=round(losses[-1], 6))
    ckpt = checkpoint_dict(model, kind="pretrain", meta={
        "experiment_hash": cfg.hash, "losses": losses, "epochs": pc.epochs})
    return ckpt, losses


def load_encoder(model: HybridModel, ckpt: dict):
    """Copy the encoder group (weights and batchnorm statistics) of ``ckpt`` into ``model``."""
    validate_checkpoint(ckpt)
    if "encoder" not in ckpt["params"]:
        raise DataError("checkpoint has no encoder group")
    params = {"encoder": {n: _decode_array(a, f"params.encoder.{n}") for n, a in ckpt["params"]["encoder"].items()}}
    state = {"encoder": {n: _decode_array(a, f"state.encoder.{n}")
                         for n, a in ckpt.get("state", {}).get("encoder", {}).items()}}
    model.load_state_dict(params, state, groups=["encoder"])


def _val_scores(model, images, labels):
    probs = model.predict_proba(images)[:, 1]
    acc = float(np.mean((probs >= 0.5) == labels))
    auc = roc_auc(labels, probs)[0] if 0 < labels.sum() < len(labels) else 0.5
    return acc, auc


def finetune(cfg: ExperimentConfig, variant: str, labeled: Dataset, validation: Dataset, seed: int,
             checkpoint=None, progress=None):
    """Supervised fine-tuning; keeps the weights of the best validation epoch.

    Returns ``(model, RunRecord)``.  Selection is by validation accuracy,
    then AUC; ties keep the earlier epoch.
    """
    fc = cfg.finetune
    labels = labeled.labels()
    if len(labels) == 0:
        raise DataError("labeled split is empty")
    if labels.min() == labels.max():
        raise DataError("labeled split contains a single class")
    spec = VARIANTS[variant]
    t0 = time.perf_counter()
    model = HybridModel(variant_model_config(cfg, variant), seed)
    if spec["ssl"]:
        if checkpoint is None:
            raise ConfigError(f"variant {variant} needs a pretraining checkpoint")
        load_encoder(model, checkpoint)
        model.set_freeze_policy(fc.freeze_policy)
    else:
        model.set_freeze_policy(fc.supervised_freeze_policy)
    opt = AdamState(lr=fc.lr)
    images = labeled.images()
    val_images, val_labels = validation.images(), validation.labels()
    record = RunRecord(variant, seed, cfg.hash, model.num_parameters(), epochs_configured=fc.epochs)
    if checkpoint is not None and spec["ssl"]:
        record.pretrain_losses = list(checkpoint.get("meta", {}).get("losses", []))

    best_key, best_state, stale = None, None, 0
    for epoch in range(fc.epochs):
        order = rng_for(seed, "finetune", "shuffle", epoch).permutation(len(images))
        total = 0.0
        for batch in _batches(order, fc.batch_size):
            total += finetune_step(model, images[batch], labels[batch], opt) * len(batch)
        record.train_losses.append(total / len(images))
        acc, auc = _val_scores(model, val_images, val_labels)
        record.val_accuracy.append(acc)
        record.val_auc.append(auc)
        record.epochs_run = epoch + 1
        _emit(progress, "finetune_epoch", variant=variant, seed=seed, epoch=epoch,
              loss=round(record.train_losses[-1], 6), val_accuracy=round(acc, 4), val_auc=round(auc, 4))
        if best_key is None or (acc, auc) > best_key:
            best_key, best_state, stale = (acc, auc), model.state_dict(), 0
            record.best_epoch = epoch
        else:
            stale += 1
            if stale >= fc.patience:
                record.early_stopped = epoch + 1 < fc.epochs
                break
    if best_state is not None:
        model.load_state_dict(*best_state)
    record.wall_clock = time.perf_counter() - t0
    return model, record


def evaluate_model(model: HybridModel, dataset: Dataset) -> MetricsReport:
    return evaluate(dataset.labels(), model.predict_proba(dataset.images())[:, 1])


def prepare_splits(cfg: ExperimentConfig, dataset: Dataset, manifest: SplitManifest = None):
    if manifest is None:
        manifest = split_by_patient(dataset, cfg.split_ratios, cfg.data.seed, cfg.max_labeled_ratio)
    manifest.validate(dataset)
    splits = {name: dataset.subset(manifest.split(name)) for name in
              ("train_unlabeled", "train_labeled", "validation", "test")}
    return manifest, splits


# -- matrix ---------------------------------------------------------------
def _pretrain_job(args):
    cfg_dict, unlabeled, seed = args
    with threadpool_limits(1):
        ckpt, _ = pretrain(ExperimentConfig.from_dict(cfg_dict), unlabeled, seed)
    return ckpt


def _finetune_job(args):
    cfg_dict, variant, splits, seed, ckpt = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    with threadpool_limits(1):
        model, record = finetune(cfg, variant, splits["train_labeled"], splits["validation"], seed, ckpt)
        record.test = evaluate_model(model, splits["test"])
    return record


def _run_jobs(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    import multiprocessing as mp

    with ProcessPoolExecutor(max_workers=min(threads, len(jobs)), mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(fn, jobs))


def run_matrix(cfg: ExperimentConfig, dataset: Dataset = None, manifest: SplitManifest = None,
               out_dir=None, threads=1, progress=None):
    """Run every configured variant for every seed on shared splits.

    Returns the RunRecords ordered by (seed, variant).  With ``out_dir`` the
    evaluation reports, run records and a per-variant summary are written
    there.  ``threads > 1`` runs independent jobs in worker processes; the
    output is identical to the sequential schedule.
    """
    if dataset is None:
        dataset = generate_synthetic(cfg.data)
    manifest, splits = prepare_splits(cfg, dataset, manifest)
    if not splits["train_labeled"].samples:
        raise DataError("labeled split is empty")
    seeds = cfg.run_seeds()
    cfg_dict = cfg.to_dict()
    needs_ssl = any(VARIANTS[v]["ssl"] for v in cfg.variants)

    t0 = time.perf_counter()
    ckpts = {}
    if needs_ssl:
        jobs = [(cfg_dict, splits["train_unlabeled"], s) for s in seeds]
        _emit(progress, "pretrain_start", seeds=list(seeds))
        for s, ckpt in zip(seeds, _run_jobs(_pretrain_job, jobs, threads)):
            ckpts[s] = ckpt
    jobs = [(cfg_dict, v, splits, s, ckpts.get(s) if VARIANTS[v]["ssl"] else None)
            for s in seeds for v in cfg.variants]
    _emit(progress, "finetune_start", jobs=len(jobs))
    records = _run_jobs(_finetune_job, jobs, threads)
    for r in records:
        _emit(progress, "run_done", variant=r.variant, seed=r.seed, test_auc=round(r.test.auc, 4),
              test_accuracy=round(r.test.accuracy, 4), wall_clock=round(r.wall_clock, 2))
    _emit(progress, "matrix_done", wall_clock=round(time.perf_counter() - t0, 2))

    if out_dir is not None:
        write_matrix_outputs(cfg, records, manifest, out_dir)
    return records


def summarize(records):
    """Mean and standard deviation of test metrics per variant, in first-seen order."""
    by_variant = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    out = {}
    for v, rs in by_variant.items():
        entry = {"seeds": [r.seed for r in rs]}
        for metric in ("auc", "accuracy", "f1_macro", "sensitivity", "specificity"):
            vals = np.array([getattr(r.test, metric) for r in rs])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_std"] = float(vals.std())
        out[v] = entry
    return out


def write_matrix_outputs(cfg: ExperimentConfig, records, manifest: SplitManifest, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    multi = len({r.seed for r in records}) > 1
    reports = {(f"{r.variant}@seed{r.seed}" if multi else r.variant): r.test for r in records}
    emit_reports(reports, out, h)
    (out / "runs.json").write_text(json.dumps(
        {"config_hash": h, "runs": [r.to_dict() for r in records]}, indent=1) + "\n")
    (out / "summary.json").write_text(json.dumps(
        {"config_hash": h, "variants": summarize(records)}, indent=1) + "\n")
    (out / "manifest.json").write_text(json.dumps({"config_hash": h, **manifest.to_dict()}, indent=1,
                                                  sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps({"config_hash": h, "config": cfg.to_dict()}, indent=1) + "\n")


def default_threads():
    env = os.environ.get("HYQAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HYQAL_THREADS must be an integer, got {env!r}") from None
    return 1
