"""Out-of-distribution scoring, AUROC, and convex-hull departure sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from mixcal import calibrate, nn
from mixcal.errors import UsageError, ValidationError

PREDICTORS = ("plain", "temperature", "mc_dropout")


def gaussian_noise_like(train_mean, train_var, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. normal rows with the given per-feature mean and variance."""
    mean = np.atleast_1d(np.asarray(train_mean, dtype=np.float64))
    var = np.broadcast_to(np.asarray(train_var, dtype=np.float64), mean.shape)
    if np.any(var < 0):
        raise ValidationError("variance must be non-negative")
    return mean + np.sqrt(var) * rng.standard_normal((n, mean.size))


def auroc(in_scores, out_scores) -> float:
    """P(in > out) + P(in == out) / 2, from average ranks of the pooled scores."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("AUROC needs non-empty in and out score sets")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def prediction_entropy(probs) -> tuple[np.ndarray, float]:
    """Per-row entropy in nats and its mean."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValidationError("expected an (n, K) probability array")
    nn.check_distribution_rows(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=1)
    return h, float(h.mean()) if h.size else 0.0


# ---------------------------------------------------------------------------
# predictors


@dataclass(frozen=True)
class Predictor:
    """How winning scores are produced: raw softmax, temperature-scaled, or MC dropout."""

    kind: str = "plain"
    temperature: float = 1.0
    passes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PREDICTORS:
            raise UsageError(f"predictor must be one of {PREDICTORS}, got {self.kind!r}")
        if self.kind == "temperature" and not self.temperature > 0:
            raise UsageError(f"temperature must be positive, got {self.temperature}")
        if self.kind == "mc_dropout" and self.passes < 1:
            raise UsageError(f"MC dropout needs at least one pass, got {self.passes}")

    def predict_proba(self, model: nn.MlpModel, x, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self.kind == "plain":
            return nn.predict_proba(model, x)
        if self.kind == "temperature":
            return calibrate.apply_temperature(nn.predict_logits(model, x), self.temperature)
        if rng is None:
            rng = np.random.default_rng(self.seed)
        return calibrate.mc_dropout_predict(model, x, self.passes, rng)


@dataclass
class OodReport:
    in_scores: np.ndarray
    out_scores: np.ndarray
    auroc: float
    edges: np.ndarray
    in_hist: np.ndarray
    out_hist: np.ndarray
    in_entropy: float
    out_entropy: float
    predictor: str

    def summary(self) -> dict:
        return {
            "predictor": self.predictor,
            "auroc": self.auroc,
            "n_in": int(self.in_scores.size),
            "n_out": int(self.out_scores.size),
            "mean_in_score": float(self.in_scores.mean()),
            "mean_out_score": float(self.out_scores.mean()),
            "mean_in_entropy": self.in_entropy,
            "mean_out_entropy": self.out_entropy,
        }


def ood_evaluate(model: nn.MlpModel, in_features, out_features, predictor: Predictor = Predictor(),
                 n_bins: int = calibrate.DEFAULT_BINS) -> OodReport:
    """Winning-score AUROC for separating in-distribution rows from out rows."""
    if not isinstance(predictor, Predictor):
        raise UsageError(f"invalid predictor spec {predictor!r}")
    in_features = np.asarray(in_features, dtype=np.float64)
    out_features = np.asarray(out_features, dtype=np.float64)
    if len(in_features) == 0 or len(out_features) == 0:
        raise ValidationError("both in and out sets must be non-empty")
    rng = np.random.default_rng(predictor.seed)
    p_in = predictor.predict_proba(model, in_features, rng)
    p_out = predictor.predict_proba(model, out_features, rng)
    s_in, s_out = p_in.max(axis=1), p_out.max(axis=1)
    edges = calibrate.bin_edges(n_bins)
    return OodReport(
        in_scores=s_in,
        out_scores=s_out,
        auroc=auroc(s_in, s_out),
        edges=edges,
        in_hist=np.bincount(calibrate.assign_bins(s_in, n_bins), minlength=n_bins),
        out_hist=np.bincount(calibrate.assign_bins(s_out, n_bins), minlength=n_bins),
        in_entropy=prediction_entropy(p_in)[1],
        out_entropy=prediction_entropy(p_out)[1],
        predictor=predictor.kind,
    )


def write_ood_report(report: OodReport, hist_path, summary_path, extra: Optional[dict] = None) -> None:
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "bin_lo", "bin_hi", "count"])
        for name, hist in (("in", report.in_hist), ("out", report.out_hist)):
            for lo, hi, c in zip(report.edges[:-1], report.edges[1:], hist):
                w.writerow([name, repr(float(lo)), repr(float(hi)), int(c)])
    doc = dict(extra or {})
    doc.update(report.summary())
    with open(summary_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# leaving the convex hull


def random_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1, 1) vector scaled to unit Euclidean norm."""
    while True:
        d = rng.uniform(-1.0, 1.0, size=dim)
        norm = np.linalg.norm(d)
        if norm > 0:
            return d / norm


def perturb(x, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Move ``x`` a distance ``mu`` along a random direction."""
    if mu < 0:
        raise ValidationError(f"mu must be >= 0, got {mu}")
    x = np.asarray(x, dtype=np.float64)
    return x + mu * random_direction(x.size, rng).reshape(x.shape)


def perturb_rows(x: np.ndarray, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb every row independently; vectorized form of :func:`perturb`."""
    if mu < 0:
        raise ValidationError(f"mu must be >= 0, got {mu}")
    d = rng.uniform(-1.0, 1.0, size=x.shape)
    norms = np.linalg.norm(d, axis=1)
    while np.any(norms == 0):
        bad = norms == 0
        d[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), x.shape[1]))
        norms = np.linalg.norm(d, axis=1)
    return x + mu * (d / norms[:, None])


@dataclass(frozen=True)
class SweepRow:
    mu: float
    accuracy: float
    mean_conf: float
    mean_entropy: float


@dataclass
class PerturbationSweep:
    mu_grid: list
    rows: list
    directions_per_image: int
    predictor: str = "plain"


def perturbation_sweep(model: nn.MlpModel, dataset, mu_grid, directions_per_image: int = 1,
                       rng: Optional[np.random.Generator] = None,
                       predictor: Predictor = Predictor()) -> PerturbationSweep:
    """Accuracy, confidence and entropy as inputs move off the data.

    The ``mu == 0`` row is the unperturbed evaluation. Each image gets
    ``directions_per_image`` fresh directions at every ``mu``; no clipping.
    """
    grid = [float(m) for m in mu_grid]
    if not grid:
        raise ValidationError("mu grid is empty")
    if any(m < 0 for m in grid) or grid != sorted(grid):
        raise ValidationError("mu grid must be non-negative and ascending")
    if directions_per_image < 1:
        raise ValidationError("need at least one direction per image")
    if len(dataset) == 0:
        raise ValidationError("cannot sweep an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    pred_rng = np.random.default_rng(predictor.seed)
    x, y = dataset.features, dataset.labels
    rows = []
    for mu in grid:
        if mu == 0:
            xs, ys = x, y
        else:
            xs = np.concatenate([perturb_rows(x, mu, rng) for _ in range(directions_per_image)])
            ys = np.tile(y, directions_per_image)
        probs = predictor.predict_proba(model, xs, pred_rng)
        rows.append(SweepRow(
            mu,
            float(np.mean(probs.argmax(axis=1) == ys)),
            float(np.mean(probs.max(axis=1))),
            prediction_entropy(probs)[1],
        ))
    return PerturbationSweep(grid, rows, directions_per_image, predictor.kind)


def write_sweep_csv(sweeps, path) -> None:
    """One CSV for one or several sweeps; a ``model`` column separates them."""
    if isinstance(sweeps, PerturbationSweep):
        sweeps = {"model": sweeps}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        multi = len(sweeps) > 1
        w.writerow((["model"] if multi else []) + ["mu", "accuracy", "mean_conf", "mean_entropy"])
        for name, sweep in sweeps.items():
            for r in sweep.rows:
                w.writerow(([name] if multi else []) +
                           [repr(r.mu), repr(r.accuracy), repr(r.mean_conf), repr(r.mean_entropy)])
