"""Training loop, evaluation runs and inference with heatmap export.

Training minimizes the multi-type objective over balanced epochs: each
epoch draws classes uniformly (anomaly types plus the normal group) until
every class has been seen at least its population size. Per-epoch held-out
image AUROC drives best-checkpoint selection. All randomness derives from
(seed, epoch) pairs, so an interrupted run resumed from a checkpoint
reproduces the uninterrupted loss trajectory exactly.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .checkpoint import (load_checkpoint, model_state_arrays, restore_model_state,
                         save_checkpoint)
from .data import Dataset, decode_image, epoch_batches, evaluation_arrays, load_manifest
from .errors import ConfigError, DataError
from .loss import anomaly_scores, multitype_loss
from .metrics import (DEFAULT_FPR_LIMIT, DEFAULT_N_THRESHOLDS, MetricReport,
                      evaluate_heatmaps, image_level_auroc)
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 32

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class TrainConfig:
    balanced: bool = True
    epochs: int = 5
    seed: int = 0
    augment_p: float = 0.5
    log_every: int = 10

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ConfigError("augment_p must lie in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


@dataclass
class EvalConfig:
    fpr_limit: float = DEFAULT_FPR_LIMIT
    n_thresholds: int = DEFAULT_N_THRESHOLDS

    def validate(self):
        if not 0.0 < self.fpr_limit <= 1.0:
            raise ConfigError("fpr_limit must lie in (0, 1]")
        if self.n_thresholds < 2:
            raise ConfigError("n_thresholds must be >= 2")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    manifest_path: str = ""
    out_dir: str = "runs/default"

    def validate(self):
        self.model.validate()
        self.optimizer.validate()
        self.training.validate()
        self.evaluation.validate()

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "optimizer": {"lr": self.optimizer.lr, "betas": list(self.optimizer.betas),
                          "batch_size": self.optimizer.batch_size},
            "training": {"balanced": self.training.balanced, "epochs": self.training.epochs,
                         "seed": self.training.seed, "augment_p": self.training.augment_p,
                         "log_every": self.training.log_every},
            "evaluation": {"fpr_limit": self.evaluation.fpr_limit,
                           "n_thresholds": self.evaluation.n_thresholds},
            "manifest_path": self.manifest_path,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d):
        known = {"model", "optimizer", "training", "evaluation", "manifest_path", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        if "model" in d:
            cfg.model = ModelConfig.from_dict(d["model"])
        for section, target in (("optimizer", cfg.optimizer),
                                ("training", cfg.training),
                                ("evaluation", cfg.evaluation)):
            for key, value in d.get(section, {}).items():
                if not hasattr(target, key):
                    raise ConfigError(f"unknown {section} option {key!r}")
                if key == "betas":
                    value = tuple(value)
                setattr(target, key, value)
        cfg.manifest_path = d.get("manifest_path", cfg.manifest_path)
        cfg.out_dir = d.get("out_dir", cfg.out_dir)
        return cfg


# ---------------------------------------------------------------------------
# shared forward helpers
# ---------------------------------------------------------------------------


def batched_forward(model, images, batch_size=32, upsample=False):
    """Eval-mode forward over an image stack; returns (z, upsampled or None).

    z is the (N, M) matrix of per-type scores, taken as spatial means of
    the low-resolution heatmaps (scores never see the upsampled maps).
    """
    zs, maps = [], []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        out = model.forward(chunk, train=False, upsample=upsample)
        zs.append(anomaly_scores(out.heatmaps).data)
        if upsample:
            maps.append(out.upsampled.data)
    z = np.concatenate(zs, axis=0)
    return z, (np.concatenate(maps, axis=0) if upsample else None)


def _window_means(losses, window):
    means = []
    for start in range(0, len(losses), window):
        means.append(float(np.mean(losses[start:start + window])))
    return means


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: list  # one dict per epoch: losses, window means, val mean I-AUROC
    best_epoch: int
    best_path: str
    last_path: str


def _save_run_checkpoint(path, config, model, classes, next_epoch, history, best):
    header = {
        "version": CHECKPOINT_VERSION,
        "run_config": config.to_dict(),
        "classes": list(classes),
        "next_epoch": next_epoch,
        "history": history,
        "best": best,
    }
    save_checkpoint(path, header, model_state_arrays(model, optimizer=True))


def train_run(config: RunConfig, resume_path=None) -> TrainResult:
    """Run (or resume) training; writes per-epoch and best checkpoints.

    Refuses datasets whose training split has no anomalous images, since
    the objective needs positive examples of every modelled type to shape
    the per-type heatmaps.
    """
    config.validate()
    manifest = load_manifest(config.manifest_path)
    if manifest.num_types != config.model.num_types:
        raise ConfigError(
            f"manifest has {manifest.num_types} anomaly types,"
            f" model is configured for {config.model.num_types}"
        )
    train_ds = Dataset(manifest, "train")
    val_ds = Dataset(manifest, "test")
    y_train = train_ds.labels_matrix()
    if not (y_train.sum(axis=1) > 0).any():
        raise DataError(
            "training split has no anomalous images; weakly supervised training"
            " requires labeled anomalous examples alongside normal ones"
        )

    model = build_model(config.model)
    history = []
    best = {"epoch": -1, "mean_i_auroc": -1.0}
    start_epoch = 0
    if resume_path is not None:
        header, arrays = load_checkpoint(resume_path)
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('version')!r}")
        restore_model_state(model, arrays, optimizer=True)
        start_epoch = int(header.get("next_epoch", 0))
        history = list(header.get("history", []))
        best = dict(header.get("best", best))
        log.info("resumed from %s at epoch %d", resume_path, start_epoch)

    os.makedirs(config.out_dir, exist_ok=True)
    params = model.parameters()
    val_images, val_y, _ = evaluation_arrays(val_ds)

    for epoch in range(start_epoch, config.training.epochs):
        losses = []
        stream = epoch_batches(train_ds, config.optimizer.batch_size,
                               config.training.balanced,
                               seed=(config.training.seed, epoch),
                               augment_p=config.training.augment_p)
        for i, (images, labels) in enumerate(stream):
            out = model.forward(images, train=True)
            z = anomaly_scores(out.heatmaps)
            loss = multitype_loss(z, labels)
            loss.backward()
            ad.adam_step(params, config.optimizer.lr, config.optimizer.betas)
            losses.append(loss.item())
            if (i + 1) % config.training.log_every == 0:
                log.info("epoch %d iter %d loss %.5f", epoch, i + 1,
                         float(np.mean(losses[-config.training.log_every:])))

        z_val, _ = batched_forward(model, val_images, config.optimizer.batch_size)
        val_auroc = image_level_auroc(z_val, val_y).mean
        entry = {
            "epoch": epoch,
            "iterations": len(losses),
            "mean_loss": float(np.mean(losses)),
            "loss_windows": _window_means(losses, config.training.log_every),
            "val_mean_i_auroc": val_auroc,
        }
        history.append(entry)
        log.info("epoch %d done: %d iters, mean loss %.5f, val mean I-AUROC %s",
                 epoch, len(losses), entry["mean_loss"],
                 "n/a" if val_auroc is None else f"{val_auroc:.4f}")

        epoch_path = os.path.join(config.out_dir, f"epoch_{epoch:03d}.ckpt")
        _save_run_checkpoint(epoch_path, config, model, manifest.classes,
                             epoch + 1, history, best)
        if val_auroc is not None and val_auroc > best["mean_i_auroc"]:
            best = {"epoch": epoch, "mean_i_auroc": val_auroc}
            _save_run_checkpoint(os.path.join(config.out_dir, "best.ckpt"),
                                 config, model, manifest.classes, epoch + 1, history, best)

    last_path = os.path.join(config.out_dir, f"epoch_{config.training.epochs - 1:03d}.ckpt")
    best_path = os.path.join(config.out_dir, "best.ckpt")
    if not os.path.isfile(best_path):
        best_path = last_path
    return TrainResult(model=model, history=history, best_epoch=best["epoch"],
                       best_path=best_path, last_path=last_path)


# ---------------------------------------------------------------------------
# evaluation and inference
# ---------------------------------------------------------------------------


def load_model(checkpoint_path):
    """Rebuild the model recorded in a checkpoint; returns (model, header)."""
    header, arrays = load_checkpoint(checkpoint_path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')!r}")
    config = RunConfig.from_dict(header["run_config"])
    model = build_model(config.model)
    restore_model_state(model, arrays, optimizer=False)
    return model, header


def evaluate_run(checkpoint_path, manifest_path, fpr_limit=None,
                 n_thresholds=None, batch_size=None):
    """Evaluate a checkpoint on a manifest's test split.

    Returns (MetricReport, info dict). When any anomalous test record lacks
    masks, pixel metrics are skipped and info["warning"] says so.
    """
    model, header = load_model(checkpoint_path)
    config = RunConfig.from_dict(header["run_config"])
    fpr_limit = config.evaluation.fpr_limit if fpr_limit is None else fpr_limit
    n_thresholds = config.evaluation.n_thresholds if n_thresholds is None else n_thresholds
    batch_size = config.optimizer.batch_size if batch_size is None else batch_size
    manifest = load_manifest(manifest_path)
    if manifest.num_types != model.config.num_types:
        raise ConfigError(
            f"manifest has {manifest.num_types} anomaly types,"
            f" checkpoint model expects {model.config.num_types}"
        )
    ds = Dataset(manifest, "test")
    images, y, masks = evaluation_arrays(ds)
    info = {"num_images": int(images.shape[0]), "classes": list(manifest.classes)}
    with_pixels = masks is not None
    if not with_pixels:
        info["warning"] = ("some anomalous test records lack masks;"
                          " pixel-level metrics skipped")
    z, maps = batched_forward(model, images, batch_size, upsample=with_pixels)
    report = evaluate_heatmaps(z, y, manifest.classes,
                               heatmaps=maps if with_pixels else None,
                               masks=masks if with_pixels else None,
                               fpr_limit=fpr_limit, n_thresholds=n_thresholds)
    return report, info


def _normalize_for_png(heatmap):
    lo, hi = float(heatmap.min()), float(heatmap.max())
    span = hi - lo
    norm = (heatmap - lo) / span if span > 0 else np.zeros_like(heatmap)
    return np.round(norm * 255.0).astype(np.uint8), lo, hi


def infer_images(checkpoint_path, image_paths, out_dir, batch_size=None):
    """Score images and export per-type heatmaps, overlays and raw ranges.

    For each input image this writes one grayscale heatmap PNG per type
    (min-max normalized), one overlay PNG per type, and a sidecar text file
    recording the raw score range so the normalization stays invertible.
    Returns a list of {"image", "scores", "heatmap_files"} dicts.
    """
    model, header = load_model(checkpoint_path)
    config = RunConfig.from_dict(header["run_config"])
    h, w, c = model.config.input_size
    if batch_size is None:
        batch_size = config.optimizer.batch_size
    os.makedirs(out_dir, exist_ok=True)
    classes = header.get("classes") or [f"type{k}" for k in range(model.config.num_types)]

    images = []
    for path in image_paths:
        arr = decode_image(path, channels=c)
        if arr.shape[1:] != (h, w):
            raise ConfigError(
                f"image {path} has size {arr.shape[1:]}, model expects ({h}, {w});"
                f" resize the image to {h}x{w} before inference"
            )
        images.append(arr)
    stack = np.stack(images)
    z, maps = batched_forward(model, stack, batch_size, upsample=True)

    results = []
    for i, path in enumerate(image_paths):
        stem = os.path.splitext(os.path.basename(path))[0]
        files = []
        ranges = []
        base = stack[i].transpose(1, 2, 0)
        if base.shape[2] == 1:
            base = np.repeat(base, 3, axis=2)
        for k, code in enumerate(classes):
            u8, lo, hi = _normalize_for_png(maps[i, k])
            heat_path = os.path.join(out_dir, f"{stem}_heatmap_{code}.png")
            Image.fromarray(u8, mode="L").save(heat_path)
            overlay = base.copy()
            overlay[..., 0] = np.clip(0.55 * overlay[..., 0] + 0.45 * (u8 / 255.0), 0, 1)
            overlay[..., 1] *= 0.55
            overlay[..., 2] *= 0.55
            over_path = os.path.join(out_dir, f"{stem}_overlay_{code}.png")
            Image.fromarray(np.round(overlay * 255).astype(np.uint8)).save(over_path)
            files.append(heat_path)
            ranges.append((code, lo, hi))
        with open(os.path.join(out_dir, f"{stem}_ranges.txt"), "w") as fh:
            for code, lo, hi in ranges:
                fh.write(f"{code} raw_min={lo!r} raw_max={hi!r}\n")
        results.append({
            "image": path,
            "scores": {code: float(z[i, k]) for k, code in enumerate(classes)},
            "heatmap_files": files,
        })
    return results
