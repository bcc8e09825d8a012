"""Training loop: mixing/smoothing policies, SGD, per-epoch tracking, checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mixcal import augment, calibrate, data, nn
from mixcal.config import DatasetSpec, ExperimentConfig
from mixcal.errors import FormatError, UsageError, ValidationError


@dataclass
class Splits:
    train: data.Dataset
    val: data.Dataset
    test: data.Dataset


def load_dataset(spec: DatasetSpec) -> data.Dataset:
    if spec.kind == "blobs":
        return data.make_blobs(spec.classes, spec.n_per_class, spec.dim, spec.centers_spread,
                               spec.within_std, spec.seed,
                               latent_dim=spec.latent_dim or None, ambient_std=spec.ambient_std)
    if spec.kind == "idx":
        return data.load_idx(spec.images, spec.labels)
    if spec.kind == "csv":
        return data.load_csv(spec.path, spec.label_column)
    raise ValidationError(f"dataset.kind: unknown dataset kind {spec.kind!r}")


def prepare_splits(spec: DatasetSpec) -> Splits:
    train, val, test = data.split(load_dataset(spec), spec.split, spec.split_seed)
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("dataset.split: train and validation splits must be non-empty")
    if spec.normalize:
        mean, std = data.normalize_stats(train)
        train, val, test = (data.apply_normalization(d, mean, std) for d in (train, val, test))
    return Splits(train, val, test)


@dataclass
class TrainResult:
    model: nn.MlpModel
    best_model: nn.MlpModel
    best_epoch: int
    rows: list
    seed: int

    def checkpoint(self, which: str) -> nn.MlpModel:
        return self.best_model if which == "best" else self.model


def _rngs(seed: int):
    init, shuffle, mix, drop = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in (init, shuffle, mix, drop))


def train_model(cfg: ExperimentConfig, splits: Splits, seed: int) -> TrainResult:
    """Train one MLP under ``cfg`` and track validation calibration every epoch.

    Mixing with ``alpha == 0`` draws lambda from {0, 1}, which only reorders
    the batch; it is run as the baseline so both paths agree bitwise.
    """
    train, val = splits.train, splits.val
    k = train.n_classes
    rng_init, rng_shuffle, rng_mix, rng_drop = _rngs(seed)
    model = nn.init_mlp([train.dim, *cfg.model.hidden, k], rng_init, cfg.model.dropout)
    mix = cfg.mix.policy()
    mix.check_model(model)
    smoothing = cfg.smoothing.policy()
    mixing = mix.active and mix.alpha > 0
    t = cfg.train
    state = nn.SgdState(t.lr, t.momentum, t.nesterov, t.weight_decay, t.milestones)
    tracker = calibrate.EpochTracker(cfg.metrics.bins)

    x_all, y_all = train.features, train.labels
    n = len(train)
    best_acc, best_model, best_epoch = -1.0, model.copy(), 0
    for epoch in range(t.epochs):
        order = rng_shuffle.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, t.batch_size):
            idx = order[start:start + t.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            targets = augment.targets_for(yb, k, smoothing)
            layer_mix = None
            if mixing:
                size = len(idx) if mix.per_sample_lambda else None
                lam = augment.sample_lambda(mix.alpha, rng_mix, size=size)
                perm = rng_mix.permutation(len(idx))
                if mix.kind == "mixup":
                    xb, targets = augment.mixup_batch(xb, targets, perm, lam)
                elif mix.kind == "feature_only_mixup":
                    xb, hard = augment.feature_only_mixup_batch(xb, yb, perm, lam)
                    targets = augment.targets_for(hard, k, smoothing)
                else:
                    layer_mix = (augment.choose_mix_layer(mix.eligible_layers, rng_mix), perm, lam)
            logits, tape = nn.forward(model, xb, nn.TRAIN, rng_drop, mix=layer_mix)
            loss = augment.training_loss(logits, targets, smoothing)
            grads = nn.backward(tape, loss)
            nn.sgd_step(model.params(), grads, state, epoch)
            loss_sum += float(loss.value) * len(idx)
        row = tracker.track_epoch(model, val, epoch + 1, loss_sum / n)
        if row.acc > best_acc:
            best_acc, best_model, best_epoch = row.acc, model.copy(), epoch + 1
    return TrainResult(model, best_model, best_epoch, tracker.rows, seed)


# ---------------------------------------------------------------------------
# model files


def save_model(model: nn.MlpModel, path, extra: Optional[dict] = None) -> None:
    doc = dict(extra or {})
    doc.update({
        "layer_sizes": list(model.layer_sizes),
        "dropout": model.dropout,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    })
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> nn.MlpModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return nn.MlpModel(
            [int(s) for s in doc["layer_sizes"]],
            [np.asarray(w, dtype=np.float64).reshape(a, b)
             for w, a, b in zip(doc["weights"], doc["layer_sizes"][:-1], doc["layer_sizes"][1:])],
            [np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            float(doc["dropout"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from None


def ensure_empty_dir(path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise UsageError(f"output directory {path} exists and is not empty; refusing to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path
