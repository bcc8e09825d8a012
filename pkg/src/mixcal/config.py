"""Experiment configuration: sectioned key/value files (INI) with exact echo.

Every field has a default; unknown sections or keys are rejected with a
message naming them. :func:`dump_config` writes the fully resolved config
and :func:`load_config` reads it back to an equal object.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from mixcal.augment import MixPolicy, SmoothingPolicy
from mixcal.errors import ValidationError


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _milestones(text: str) -> tuple:
    out = []
    for item in text.replace(",", " ").split():
        epoch, _, divisor = item.partition(":")
        out.append((int(epoch), float(divisor) if divisor else 2.0))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{e}:{d!r}" for e, d in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _opt(default, parse=None, doc=""):
    factory = (lambda: default) if isinstance(default, tuple) else None
    meta = {"parse": parse, "doc": doc}
    if factory:
        return field(default_factory=factory, metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = _opt("blobs", doc="blobs | idx | csv")
    classes: int = _opt(4, doc="number of blob classes")
    n_per_class: int = _opt(100, doc="blob samples per class")
    dim: int = _opt(10, doc="blob feature dimension")
    centers_spread: float = _opt(1.0, doc="std of random blob centers")
    within_std: float = _opt(1.0, doc="std of each blob")
    seed: int = _opt(0, doc="seed of the blob generator")
    latent_dim: int = _opt(0, doc="blob subspace dimension; 0 = dim (isotropic)")
    ambient_std: float = _opt(0.0, doc="noise std off the blob subspace")
    images: str = _opt("", doc="IDX images file (kind = idx)")
    labels: str = _opt("", doc="IDX labels file (kind = idx)")
    path: str = _opt("", doc="CSV file (kind = csv)")
    label_column: str = _opt("label", doc="label column name (kind = csv)")
    split: tuple = _opt((0.6, 0.2, 0.2), _floats, "train, val, test fractions")
    split_seed: int = _opt(0, doc="seed of the split shuffle")
    normalize: bool = _opt(True, _bool, "standardize with training statistics")


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = _opt((64, 64), _ints, "hidden layer widths")
    dropout: float = _opt(0.0, doc="dropout rate after each hidden layer")


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = _opt(200, doc="training epochs")
    batch_size: int = _opt(128, doc="minibatch size")
    lr: float = _opt(0.1, doc="initial learning rate")
    momentum: float = _opt(0.9, doc="SGD momentum")
    nesterov: bool = _opt(True, _bool, "Nesterov momentum")
    weight_decay: float = _opt(5e-4, doc="L2 weight decay")
    milestones: tuple = _opt(((60, 2.0), (120, 2.0), (160, 2.0)), _milestones,
                             "epoch:divisor learning-rate drops")


@dataclass(frozen=True)
class MixSpec:
    kind: str = _opt("none", doc="none | mixup | feature_only_mixup | manifold_mixup")
    alpha: float = _opt(0.0, doc="Beta(alpha, alpha) mixing parameter")
    layers: tuple = _opt((0,), _ints, "manifold mixup layers (0 = input)")
    per_sample_lambda: bool = _opt(False, _bool, "one lambda per sample instead of per batch")

    def policy(self) -> MixPolicy:
        return MixPolicy(self.kind, self.alpha, self.layers, self.per_sample_lambda)


@dataclass(frozen=True)
class SmoothingSpec:
    kind: str = _opt("none", doc="none | epsilon_smoothing | erl")
    epsilon: float = _opt(0.1, doc="label smoothing mass")
    erl: float = _opt(0.1, doc="entropy penalty coefficient")

    def policy(self) -> SmoothingPolicy:
        return SmoothingPolicy(self.kind, self.epsilon, self.erl)


@dataclass(frozen=True)
class MetricSpec:
    bins: int = _opt(15, doc="calibration bins")
    checkpoint: str = _opt("best", doc="best | final: which checkpoint reports and sweeps use")


@dataclass(frozen=True)
class RunSpec:
    seeds: tuple = _opt((0,), _ints, "training seeds")
    out: str = _opt("runs/experiment", doc="output directory")


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple = _opt((0.0, 0.1, 0.2, 0.3, 0.4, 1.0), _floats, "alpha grid")


@dataclass(frozen=True)
class OodSpec:
    source: str = _opt("gaussian", doc="gaussian | csv | idx")
    path: str = _opt("", doc="out-of-distribution CSV (source = csv)")
    images: str = _opt("", doc="out-of-distribution IDX images (source = idx)")
    labels: str = _opt("", doc="out-of-distribution IDX labels (source = idx)")
    noise_stats: str = _opt("feature", doc="feature | scalar noise statistics")
    n_noise: int = _opt(1000, doc="number of noise samples")
    predictor: str = _opt("plain", doc="plain | temperature | mc_dropout")
    temperature: float = _opt(0.0, doc="fixed temperature; 0 fits it on validation")
    passes: int = _opt(10, doc="MC dropout forward passes")
    seed: int = _opt(0, doc="seed of noise and dropout draws")


@dataclass(frozen=True)
class PerturbSpec:
    mu: tuple = _opt((0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0), _floats, "perturbation radii")
    directions: int = _opt(1, doc="random directions per image and radius")
    seed: int = _opt(0, doc="seed of direction draws")


@dataclass(frozen=True)
class EntropySpec:
    alphas: tuple = _opt((0.0, 0.2, 0.4, 1.0), _floats, "alphas to histogram")
    samples: int = _opt(100000, doc="draws per alpha")
    collision_prob: float = _opt(0.0, doc="probability a pair shares a class")
    bins: int = _opt(20, doc="histogram bins over [0, ln 2]")
    seed: int = _opt(0, doc="seed of the draws")


SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "train": TrainSpec,
    "mix": MixSpec,
    "smoothing": SmoothingSpec,
    "metrics": MetricSpec,
    "run": RunSpec,
    "sweep": SweepSpec,
    "ood": OodSpec,
    "perturb": PerturbSpec,
    "entropy": EntropySpec,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    mix: MixSpec = field(default_factory=MixSpec)
    smoothing: SmoothingSpec = field(default_factory=SmoothingSpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    run: RunSpec = field(default_factory=RunSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    ood: OodSpec = field(default_factory=OodSpec)
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    entropy: EntropySpec = field(default_factory=EntropySpec)

    def with_(self, section: str, **changes) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks; raises ValidationError naming the offending field."""
    d, t = cfg.dataset, cfg.train
    if d.kind not in ("blobs", "idx", "csv"):
        raise ValidationError(f"dataset.kind: unknown dataset kind {d.kind!r}")
    if d.kind == "blobs" and not 0 <= d.latent_dim <= d.dim:
        raise ValidationError(f"dataset.latent_dim: must lie in [0, dim], got {d.latent_dim}")
    if d.kind == "idx" and not (d.images and d.labels):
        raise ValidationError("dataset.images / dataset.labels: required when kind = idx")
    if d.kind == "csv" and not d.path:
        raise ValidationError("dataset.path: required when kind = csv")
    if len(d.split) != 3 or abs(sum(d.split) - 1.0) > 1e-9 or min(d.split) < 0:
        raise ValidationError(f"dataset.split: fractions must be three non-negatives summing to 1, got {d.split}")
    if not d.split[1] > 0:
        raise ValidationError("dataset.split: validation fraction must be positive")
    if any(h < 1 for h in cfg.model.hidden):
        raise ValidationError(f"model.hidden: widths must be positive, got {cfg.model.hidden}")
    if not 0.0 <= cfg.model.dropout < 1.0:
        raise ValidationError(f"model.dropout: must lie in [0, 1), got {cfg.model.dropout}")
    if t.epochs < 1:
        raise ValidationError("train.epochs: must be >= 1")
    if t.batch_size < 1:
        raise ValidationError("train.batch_size: must be >= 1")
    if t.lr <= 0:
        raise ValidationError("train.lr: must be positive")
    if any(dv <= 0 or e < 0 for e, dv in t.milestones):
        raise ValidationError(f"train.milestones: bad milestone in {t.milestones}")
    try:
        mix = cfg.mix.policy()
    except ValidationError as exc:
        raise ValidationError(f"mix: {exc}") from None
    try:
        smoothing = cfg.smoothing.policy()
    except ValidationError as exc:
        raise ValidationError(f"smoothing: {exc}") from None
    if mix.active and smoothing.kind != "none":
        raise ValidationError("mix.kind / smoothing.kind: mixing and label smoothing cannot be combined")
    if mix.kind == "manifold_mixup":
        bad = [k for k in mix.eligible_layers if not 0 <= k <= len(cfg.model.hidden)]
        if bad:
            raise ValidationError(f"mix.layers: {bad} invalid for {len(cfg.model.hidden)} hidden layers")
        if mix.per_sample_lambda:
            raise ValidationError("mix.per_sample_lambda: not supported for manifold mixup")
    if cfg.metrics.bins < 1:
        raise ValidationError("metrics.bins: must be >= 1")
    if cfg.metrics.checkpoint not in ("best", "final"):
        raise ValidationError(f"metrics.checkpoint: must be best or final, got {cfg.metrics.checkpoint!r}")
    if not cfg.run.seeds:
        raise ValidationError("run.seeds: at least one seed required")
    if cfg.ood.source not in ("gaussian", "csv", "idx"):
        raise ValidationError(f"ood.source: unknown source {cfg.ood.source!r}")
    if cfg.ood.noise_stats not in ("feature", "scalar"):
        raise ValidationError(f"ood.noise_stats: must be feature or scalar, got {cfg.ood.noise_stats!r}")
    if cfg.ood.predictor not in ("plain", "temperature", "mc_dropout"):
        raise ValidationError(f"ood.predictor: unknown predictor {cfg.ood.predictor!r}")
    if cfg.ood.passes < 1:
        raise ValidationError("ood.passes: must be >= 1")
    mu = cfg.perturb.mu
    if not mu or list(mu) != sorted(mu) or mu[0] < 0:
        raise ValidationError(f"perturb.mu: must be a non-empty ascending list of radii >= 0, got {mu}")
    if cfg.perturb.directions < 1:
        raise ValidationError("perturb.directions: must be >= 1")
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: {exc}") from None
    sections = {}
    for name in parser.sections():
        cls = SECTIONS.get(name)
        if cls is None:
            raise ValidationError(f"{source}: unknown section [{name}]")
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            f = known.get(key)
            if f is None:
                raise ValidationError(f"{source}: unknown key {name}.{key}")
            parse = f.metadata.get("parse") or type(f.default)
            try:
                values[key] = parse(raw.strip())
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{source}: {name}.{key}: cannot parse {raw!r} ({exc})") from None
        sections[name] = cls(**values)
    return validate(ExperimentConfig(**sections))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        spec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(spec):
            lines.append(f"{f.name} = {_fmt(getattr(spec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def defaults_help() -> str:
    """Human-readable list of every key and its default, for ``--help``."""
    cfg = ExperimentConfig()
    lines = ["config keys and defaults:"]
    for name in SECTIONS:
        lines.append(f"  [{name}]")
        spec = getattr(cfg, name)
        for f in fields(spec):
            lines.append(f"    {f.name} = {_fmt(getattr(spec, f.name))}  ({f.metadata.get('doc', '')})")
    return "\n".join(lines)
