"""RDrop training: two stochastic passes per batch, Adam updates, checkpointing.

The loss combines the mean cross-entropy of both passes with a symmetric,
alpha-weighted KL consistency term between their softmax distributions,
averaged over valid frames only (label -1 is masked out of loss and metrics
but stays in segments to preserve temporal continuity). Training is fully
deterministic given the seed: parameter init, batch order and dropout draws
all come from streams derived from it.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import (
    FeatureRegistry,
    FeatureTrack,
    LabelTrack,
    Manifest,
    VideoData,
    load_manifest,
    load_video,
    save_labels,
    write_feature_file,
)
from .errors import DataFormatError, NumericError
from .evaluation import evaluate_tracks
from .fileio import atomic_write_text, write_json
from .models import ExpressionModel, ModelConfig
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .tensor import DTYPE, Graph, Tensor


@dataclass
class TrainingSettings:
    lr: float = 1e-4
    epochs: int = 25
    alpha: float = 5.0
    batch_segments: int = 8  # transformer steps consume segments across videos
    batch_videos: int = 4    # LSTM steps consume whole videos, segments in order

    def to_json(self):
        return {"lr": self.lr, "epochs": self.epochs, "alpha": self.alpha,
                "batch_segments": self.batch_segments, "batch_videos": self.batch_videos}

    @classmethod
    def from_json(cls, doc):
        out = cls(lr=float(doc.get("lr", 1e-4)), epochs=int(doc.get("epochs", 25)),
                  alpha=float(doc.get("alpha", 5.0)),
                  batch_segments=int(doc.get("batch_segments", 8)),
                  batch_videos=int(doc.get("batch_videos", 4)))
        if out.alpha < 0:
            raise DataFormatError("training.alpha must be >= 0")
        if out.epochs < 1 or out.batch_segments < 1 or out.batch_videos < 1:
            raise DataFormatError("training epochs and batch sizes must be >= 1")
        return out


@dataclass
class ExperimentConfig:
    """Everything one run needs; defaults reproduce the reference settings."""

    manifest: str = ""
    output_dir: str = "run"
    seed: int = 1
    visual_features: list = field(default_factory=list)
    audio_features: list = field(default_factory=list)
    registry_extra: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSettings = field(default_factory=TrainingSettings)

    def registry(self) -> FeatureRegistry:
        return FeatureRegistry(extra=self.registry_extra)

    def validate(self):
        if not self.visual_features:
            raise DataFormatError("config selects no visual feature sets")
        if not self.audio_features:
            raise DataFormatError("config selects no audio feature sets")
        reg = self.registry()
        for name in list(self.visual_features) + list(self.audio_features):
            if name not in reg:
                raise DataFormatError(f"config references unknown feature set {name!r}")
        self.model.validate()
        return self

    def to_json(self) -> dict:
        return {
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "features": {"visual": list(self.visual_features),
                         "audio": list(self.audio_features)},
            "registry": dict(self.registry_extra),
            "model": self.model.to_json(),
            "training": self.training.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        features = doc.get("features", {})
        cfg = cls(
            manifest=doc.get("manifest", ""),
            output_dir=doc.get("output_dir", "run"),
            seed=int(doc.get("seed", 1)),
            visual_features=list(features.get("visual", [])),
            audio_features=list(features.get("audio", [])),
            registry_extra=dict(doc.get("registry", {})),
            model=ModelConfig.from_json(doc.get("model", {})),
            training=TrainingSettings.from_json(doc.get("training", {})),
        )
        return cfg.validate()


# -- loss -----------------------------------------------------------------------

def rdrop_loss(g: Graph, logits1: Tensor, logits2: Tensor, labels, mask,
               alpha: float):
    """Build the two-pass loss on the graph; None when every frame is masked.

    L = (CE(p1, y) + CE(p2, y)) / 2 + alpha * (KL(p1||p2) + KL(p2||p1)) / 2,
    each term a mean over valid frames. Masked frames are multiplied by zero
    before any reduction, so they contribute exactly zero gradient.
    """
    if logits1.shape != logits2.shape:
        raise ValueError(f"rdrop_loss: pass shapes differ: {logits1.shape} vs {logits2.shape}")
    if alpha < 0:
        raise ValueError(f"rdrop_loss: alpha must be >= 0, got {alpha}")
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    n, classes = logits1.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise ValueError(f"rdrop_loss: labels/mask must have shape ({n},)")
    n_valid = int(mask.sum())
    if n_valid == 0:
        return None
    if labels[mask].min() < 0 or labels[mask].max() >= classes:
        raise ValueError("rdrop_loss: valid frame with label outside class range")

    onehot = np.zeros((n, classes), DTYPE)
    onehot[np.flatnonzero(mask), labels[mask]] = 1.0
    onehot_t = Tensor(onehot)
    mask_t = Tensor(np.repeat(mask[:, None], classes, axis=1).astype(DTYPE))
    inv = 1.0 / n_valid

    lp1 = g.log_softmax(logits1)
    lp2 = g.log_softmax(logits2)
    ce1 = g.scale(g.sum(g.mul(lp1, onehot_t)), -inv)
    ce2 = g.scale(g.sum(g.mul(lp2, onehot_t)), -inv)

    p1 = g.softmax(logits1)
    p2 = g.softmax(logits2)
    kl12 = g.scale(g.sum(g.mul(g.mul(p1, g.add(lp1, g.scale(lp2, -1.0))), mask_t)), inv)
    kl21 = g.scale(g.sum(g.mul(g.mul(p2, g.add(lp2, g.scale(lp1, -1.0))), mask_t)), inv)

    return g.add(g.scale(g.add(ce1, ce2), 0.5),
                 g.scale(g.add(kl12, kl21), 0.5 * alpha))


# -- dataset loading ----------------------------------------------------------------

@dataclass
class LoadedDataset:
    videos: dict          # id -> VideoData
    train_ids: list
    val_ids: list
    input_dim: int


def load_dataset(manifest: Manifest, config: ExperimentConfig) -> LoadedDataset:
    registry = config.registry()
    train_ids = manifest.split_ids("train")
    val_ids = manifest.split_ids("val")
    if not train_ids:
        raise DataFormatError("train split is empty")
    videos = {}
    for vid in dict.fromkeys(train_ids + val_ids):
        videos[vid] = load_video(manifest.video(vid), registry,
                                 config.visual_features, config.audio_features)
    dims = {v.input_dim for v in videos.values()}
    if len(dims) != 1:
        raise DataFormatError(f"videos disagree on fused input dim: {sorted(dims)}")
    return LoadedDataset(videos, train_ids, val_ids, dims.pop())


# -- prediction -----------------------------------------------------------------------

def predict_video(model: ExpressionModel, video: VideoData):
    """Per-frame probabilities for one video in eval mode.

    Overlapping windows (transformer with stride < length) are merged by
    averaging logits per frame before the softmax.
    """
    from .ensemble import PredictionTrack

    cfg = model.config
    n = video.n_frames
    logit_sum = np.zeros((n, cfg.classes), np.float64)
    hits = np.zeros(n, np.int64)
    for seg in video.segments(cfg.seg_len, cfg.stride):
        g = Graph(record=False)
        logits = model.eval_logits(g, seg.features, video.video_id, seg.index)
        logit_sum[seg.start - 1:seg.end] += logits.data
        hits[seg.start - 1:seg.end] += 1
    mean_logits = logit_sum / hits[:, None]
    shifted = mean_logits - mean_logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return PredictionTrack.from_probs(video.video_id, probs)


def evaluate_split(model: ExpressionModel, dataset: LoadedDataset, ids):
    labels = {vid: dataset.videos[vid].labels for vid in ids}
    preds = {vid: predict_video(model, dataset.videos[vid]).labels for vid in ids}
    return evaluate_tracks(labels, preds)


# -- training loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: str
    best_val_f1: float
    best_checkpoint: str
    log_path: str
    records: list
    model: ExpressionModel


def _training_batches(dataset, config, order_rng):
    """Yield per-step work lists of (video_id, Segment)."""
    model_cfg = config.model
    if model_cfg.encoder == "transformer":
        segments = []
        for vid in dataset.train_ids:
            for seg in dataset.videos[vid].segments(model_cfg.seg_len, model_cfg.stride):
                segments.append((vid, seg))
        order = order_rng.permutation(len(segments))
        size = config.training.batch_segments
        for i in range(0, len(order), size):
            yield [segments[j] for j in order[i:i + size]]
    else:
        ids = list(dataset.train_ids)
        order = order_rng.permutation(len(ids))
        size = config.training.batch_videos
        for i in range(0, len(order), size):
            batch = []
            for j in order[i:i + size]:
                video = dataset.videos[ids[j]]
                for seg in video.segments(model_cfg.seg_len, model_cfg.stride):
                    batch.append((ids[j], seg))
            yield batch


def train(config: ExperimentConfig, seed=None, manifest: Manifest | None = None,
          log_fn=None) -> TrainResult:
    """Run the full training loop and retain the best-validation checkpoint.

    Writes resolved_config.json, train_log.jsonl (one record per epoch with
    epoch, train_loss, val_macro_f1, per_class_f1 and wall_ms) and best.ckpt
    into the config's output directory.
    """
    config.validate()
    if seed is None:
        seed = config.seed
    if manifest is None:
        manifest = load_manifest(config.manifest)
    dataset = load_dataset(manifest, config)
    if not dataset.val_ids:
        raise DataFormatError("val split is empty; point it at the train videos "
                              "if no holdout exists")

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    resolved = config.to_json()
    resolved["seed"] = int(seed)
    resolved["fused_input_dim"] = dataset.input_dim
    resolved["feature_order"] = {"visual": list(config.visual_features),
                                 "audio": list(config.audio_features)}
    write_json(os.path.join(out_dir, "resolved_config.json"), resolved)

    streams = np.random.SeedSequence(seed).spawn(3)
    init_rng = np.random.default_rng(streams[0])
    order_rng = np.random.default_rng(streams[1])
    dropout_rng = np.random.default_rng(streams[2])

    model = ExpressionModel(config.model, dataset.input_dim, init_rng)
    adam = AdamState(lr=config.training.lr)
    alpha = config.training.alpha

    log_path = os.path.join(out_dir, "train_log.jsonl")
    best_path = os.path.join(out_dir, "best.ckpt")
    log_lines = []
    records = []
    best_f1 = -1.0

    for epoch in range(1, config.training.epochs + 1):
        started = time.perf_counter()
        model.reset_video_state()
        loss_sum = 0.0
        valid_sum = 0
        for batch_idx, batch in enumerate(_training_batches(dataset, config, order_rng)):
            g = Graph()
            firsts, seconds, labels, masks = [], [], [], []
            try:
                for vid, seg in batch:
                    l1, l2 = model.two_pass_logits(g, seg.features, vid, seg.index,
                                                   dropout_rng)
                    firsts.append(l1)
                    seconds.append(l2)
                    labels.append(seg.labels)
                    masks.append(seg.valid)
                loss = rdrop_loss(
                    g,
                    g.concat(firsts, axis=0) if len(firsts) > 1 else firsts[0],
                    g.concat(seconds, axis=0) if len(seconds) > 1 else seconds[0],
                    np.concatenate(labels), np.concatenate(masks), alpha)
            except ValueError as exc:
                if "NaN" in str(exc):
                    raise NumericError(
                        f"NaN at epoch {epoch} batch {batch_idx}: {exc}") from exc
                raise
            if loss is None:
                continue  # every frame masked; the batch contributes nothing
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {batch_idx}")
            g.backward(loss)
            grads = collect_grads(model.parameters())
            adam_step(model.parameters(), grads, adam)
            zero_grads(model.parameters())
            n_valid = int(np.concatenate(masks).sum())
            loss_sum += value * n_valid
            valid_sum += n_valid

        model.reset_video_state()
        report, _ = evaluate_split(model, dataset, dataset.val_ids)
        train_loss = loss_sum / valid_sum if valid_sum else 0.0
        wall_ms = int((time.perf_counter() - started) * 1000)
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_macro_f1": report.macro_f1,
            "per_class_f1": list(report.per_class_f1),
            "wall_ms": wall_ms,
        }
        records.append(record)
        log_lines.append(json.dumps(record, sort_keys=True))
        atomic_write_text(log_path, "\n".join(log_lines) + "\n")
        if report.macro_f1 > best_f1:
            best_f1 = report.macro_f1
            save_checkpoint(model.parameters(), best_path)
        if log_fn is not None:
            log_fn(record)

    return TrainResult(out_dir, best_f1, best_path, log_path, records, model)


# -- synthetic dataset ---------------------------------------------------------------

SYNTH_VISUAL = "synthvis"
SYNTH_AUDIO = "synthaud"


def synth_dataset(out_dir: str, videos: int = 20, frames: int = 200, classes: int = 8,
                  visual_dim: int = 64, audio_dim: int = 32, sigma: float = 0.5,
                  seed: int = 0) -> str:
    """Write a separable synthetic dataset in the production file formats.

    Labels are piecewise constant runs; features are Gaussian around a fixed
    per-class mean drawn once per modality. Identical arguments produce
    byte-identical files. Returns the manifest path; a ready-to-train
    config.json sits next to it.
    """
    rng = np.random.default_rng(seed)
    visual_means = rng.normal(0.0, 1.0, (classes, visual_dim))
    audio_means = rng.normal(0.0, 1.0, (classes, audio_dim))

    labels_dir = os.path.join(out_dir, "labels")
    features_dir = os.path.join(out_dir, "features")
    os.makedirs(labels_dir, exist_ok=True)
    os.makedirs(features_dir, exist_ok=True)

    entries = []
    ids = []
    for v in range(videos):
        vid = f"vid{v:03d}"
        ids.append(vid)
        labels = np.empty(frames, dtype=np.int64)
        t = 0
        while t < frames:
            run = int(rng.integers(15, 51))
            labels[t:t + run] = int(rng.integers(0, classes))
            t += run
        visual = (visual_means[labels]
                  + sigma * rng.normal(size=(frames, visual_dim))).astype(np.float32)
        audio = (audio_means[labels]
                 + sigma * rng.normal(size=(frames, audio_dim))).astype(np.float32)

        label_file = os.path.join(labels_dir, f"{vid}.csv")
        save_labels(LabelTrack(vid, labels), label_file)
        present = np.ones(frames, dtype=bool)
        vis_file = os.path.join(features_dir, f"{vid}.{SYNTH_VISUAL}.mmft")
        aud_file = os.path.join(features_dir, f"{vid}.{SYNTH_AUDIO}.mmft")
        write_feature_file(FeatureTrack(vid, SYNTH_VISUAL, visual, present), vis_file)
        write_feature_file(FeatureTrack(vid, SYNTH_AUDIO, audio, present), aud_file)
        entries.append({
            "id": vid,
            "n_frames": frames,
            "label_file": os.path.join("labels", f"{vid}.csv"),
            "features": {
                SYNTH_VISUAL: os.path.join("features", f"{vid}.{SYNTH_VISUAL}.mmft"),
                SYNTH_AUDIO: os.path.join("features", f"{vid}.{SYNTH_AUDIO}.mmft"),
            },
        })

    manifest_path = os.path.join(out_dir, "manifest.json")
    write_json(manifest_path, {"videos": entries, "splits": {"train": ids, "val": ids}})

    config = ExperimentConfig(
        manifest="manifest.json",
        output_dir="run",
        seed=seed,
        visual_features=[SYNTH_VISUAL],
        audio_features=[SYNTH_AUDIO],
        registry_extra={
            SYNTH_VISUAL: {"dim": visual_dim, "modality": "visual"},
            SYNTH_AUDIO: {"dim": audio_dim, "modality": "audio"},
        },
    )
    write_json(os.path.join(out_dir, "config.json"), config.to_json())
    return manifest_path
