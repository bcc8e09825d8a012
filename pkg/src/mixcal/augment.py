"""Vicinal sample generation (mixup and variants) and smoothed training targets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mixcal import nn
from mixcal.errors import DimensionError, UsageError, ValidationError

MIX_KINDS = ("none", "mixup", "feature_only_mixup", "manifold_mixup")
SMOOTHING_KINDS = ("none", "epsilon_smoothing", "erl")


@dataclass(frozen=True)
class MixPolicy:
    kind: str = "none"
    alpha: float = 0.0
    eligible_layers: tuple = (0,)
    per_sample_lambda: bool = False

    def __post_init__(self):
        if self.kind not in MIX_KINDS:
            raise ValidationError(f"mix kind must be one of {MIX_KINDS}, got {self.kind!r}")
        if self.kind != "none" and self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.kind == "manifold_mixup" and not self.eligible_layers:
            raise ValidationError("manifold mixup needs at least one eligible layer")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def check_model(self, model: nn.MlpModel) -> None:
        if self.kind == "manifold_mixup":
            bad = [k for k in self.eligible_layers if not 0 <= k <= model.n_hidden]
            if bad:
                raise ValidationError(f"mix layers {bad} invalid for a model with {model.n_hidden} hidden layers")


@dataclass(frozen=True)
class SmoothingPolicy:
    kind: str = "none"
    epsilon: float = 0.0
    erl_coefficient: float = 0.0

    def __post_init__(self):
        if self.kind not in SMOOTHING_KINDS:
            raise ValidationError(f"smoothing kind must be one of {SMOOTHING_KINDS}, got {self.kind!r}")
        if self.kind == "epsilon_smoothing" and not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.kind == "erl" and self.erl_coefficient < 0:
            raise ValidationError(f"erl coefficient must be >= 0, got {self.erl_coefficient}")


# ---------------------------------------------------------------------------
# mixing


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Draw the mixing weight from Beta(alpha, alpha).

    ``alpha == 0`` is taken as the limiting Bernoulli(1/2) over {0, 1}: each
    mixed sample is exactly one of its parents.
    """
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        draw = rng.integers(0, 2, size=size).astype(np.float64)
    else:
        draw = rng.beta(alpha, alpha, size=size)
    return float(draw) if size is None else draw


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError("perm must be a permutation of the batch indices")
    return perm


def _mix(a: np.ndarray, b: np.ndarray, lam) -> np.ndarray:
    if np.ndim(lam) == 0:
        w, rest = nn.convex_weights(lam)
    else:
        pairs = np.array([nn.convex_weights(v) for v in lam])
        w, rest = pairs[:, :1], pairs[:, 1:]
    out = w * a + rest * b
    # guard the hull against last-bit rounding
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def mixup_batch(x, y, perm, lam):
    """Mix each row with its partner ``perm[i]``: features and soft labels alike.

    ``lam`` is a scalar, or one weight per row when mixing per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"features {x.shape} and labels {y.shape} do not pair up")
    perm = _check_perm(perm, x.shape[0])
    if np.ndim(lam) and np.shape(lam) != (x.shape[0],):
        raise DimensionError("per-sample lambda must have one entry per row")
    return _mix(x, x[perm], lam), _mix(y, y[perm], lam)


def feature_only_mixup_batch(x, y_hard, perm, lam):
    """Mix features only; each row keeps the hard label of the nearer parent."""
    x = np.asarray(x, dtype=np.float64)
    y_hard = np.asarray(y_hard)
    if x.ndim != 2 or y_hard.shape != (x.shape[0],):
        raise DimensionError(f"features {x.shape} and labels {y_hard.shape} do not pair up")
    perm = _check_perm(perm, x.shape[0])
    if np.ndim(lam) and np.shape(lam) != (x.shape[0],):
        raise DimensionError("per-sample lambda must have one entry per row")
    # ties at exactly 0.5 keep the row's own label
    labels = np.where(np.asarray(lam) >= 0.5, y_hard, y_hard[perm])
    return _mix(x, x[perm], lam), labels


def manifold_mix_forward(model: nn.MlpModel, x, perm, lam: float, layer_k: int,
                         mode: str = nn.TRAIN, rng: Optional[np.random.Generator] = None,
                         eligible_layers=None):
    """Forward pass that mixes the activations entering layer ``layer_k``."""
    if eligible_layers is not None and layer_k not in eligible_layers:
        raise UsageError(f"layer {layer_k} is not among the eligible layers {sorted(eligible_layers)}")
    if not 0 <= layer_k <= model.n_hidden:
        raise UsageError(f"layer {layer_k} outside 0..{model.n_hidden}")
    perm = _check_perm(perm, np.shape(x)[0])
    return nn.forward(model, x, mode, rng, mix=(layer_k, perm, lam))


def choose_mix_layer(eligible_layers, rng: np.random.Generator) -> int:
    layers = sorted(eligible_layers)
    return int(layers[rng.integers(len(layers))])


# ---------------------------------------------------------------------------
# targets and losses


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"class labels must lie in [0, {k})")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def epsilon_smooth(y_hard: int, epsilon: float, k: int) -> np.ndarray:
    """``1 - epsilon`` on the true class, the rest spread evenly over the others."""
    return smooth_labels(np.array([y_hard]), epsilon, k)[0]


def smooth_labels(labels, epsilon: float, k: int) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in [0, 1), got {epsilon}")
    if k < 2:
        raise ValidationError("smoothing needs at least two classes")
    hot = one_hot(labels, k)
    return hot * (1.0 - epsilon) + (1.0 - hot) * (epsilon / (k - 1))


def targets_for(labels, k: int, smoothing: SmoothingPolicy) -> np.ndarray:
    if smoothing.kind == "epsilon_smoothing":
        return smooth_labels(labels, smoothing.epsilon, k)
    return one_hot(labels, k)


def erl_loss(logits: nn.Node, y, kappa: float) -> nn.Node:
    """Cross-entropy minus ``kappa`` times the mean prediction entropy."""
    if kappa < 0:
        raise ValidationError(f"kappa must be >= 0, got {kappa}")
    ce = nn.soft_cross_entropy(logits, y)
    if kappa == 0:
        return ce
    return nn.add(ce, nn.scale(nn.mean_entropy(logits), -kappa))


def training_loss(logits: nn.Node, y, smoothing: SmoothingPolicy) -> nn.Node:
    if smoothing.kind == "erl":
        return erl_loss(logits, y, smoothing.erl_coefficient)
    return nn.soft_cross_entropy(logits, y)


# ---------------------------------------------------------------------------
# label entropy


def label_entropy(dist) -> float:
    """Entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionError("label_entropy expects a single distribution")
    nn.check_distribution_rows(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def binary_entropy(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(lam * np.log(lam) + (1 - lam) * np.log1p(-lam))
    return np.where((lam <= 0) | (lam >= 1), 0.0, h)


@dataclass
class EntropyHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    variance: float
    n: int
    entropies: np.ndarray = field(repr=False, default=None)

    @property
    def standard_error(self) -> float:
        return float(np.sqrt(self.variance / self.n))

    def rows(self):
        return [(float(lo), float(hi), int(c))
                for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def entropy_distribution(alpha: float, n_samples: int, class_collision_prob: float,
                         rng: np.random.Generator, bins: int = 20) -> EntropyHistogram:
    """Monte Carlo distribution of mixed two-class label entropies.

    With probability ``class_collision_prob`` both parents share a class and
    the mixed label stays one-hot.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if not 0.0 <= class_collision_prob <= 1.0:
        raise ValidationError("class_collision_prob must lie in [0, 1]")
    lam = sample_lambda(alpha, rng, size=n_samples)
    h = binary_entropy(lam)
    if class_collision_prob > 0:
        h = np.where(rng.random(n_samples) < class_collision_prob, 0.0, h)
    edges = np.linspace(0.0, np.log(2.0), bins + 1)
    counts, _ = np.histogram(np.minimum(h, edges[-1]), bins=edges)
    variance = float(h.var(ddof=1)) if n_samples > 1 else 0.0
    return EntropyHistogram(edges, counts, float(h.mean()), variance, n_samples, h)


def write_histogram_csv(hist: EntropyHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in hist.rows():
            w.writerow([repr(lo), repr(hi), c])
