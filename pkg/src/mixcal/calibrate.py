"""Binned calibration metrics, temperature scaling and MC-dropout averaging.

Bins are equal-width and right-closed, ``((m-1)/M, m/M]``, with the first
bin also holding confidence 0. Per-bin sums use ``math.fsum`` so results do
not depend on sample order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from mixcal import nn
from mixcal.errors import ValidationError

DEFAULT_BINS = 15
NLL_FLOOR = 1e-12
TEMPERATURE_BOUNDS = (0.05, 10.0)
TEMPERATURE_STEP = 0.01


@dataclass(frozen=True)
class BinStats:
    m: int
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


@dataclass
class CalibrationReport:
    bins: list
    ece: float
    oe: float
    nll: float
    accuracy: float
    mean_winning_score: float
    n: int

    @property
    def winning_score_histogram(self) -> list[int]:
        return [b.count for b in self.bins]

    def scalars(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "mean_winning_score": self.mean_winning_score,
            "ece": self.ece,
            "oe": self.oe,
            "nll": self.nll,
        }


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise ValidationError(f"need at least one bin, got {n_bins}")
    return np.arange(n_bins + 1) / n_bins


def assign_bins(confidences, n_bins: int) -> np.ndarray:
    """Zero-based bin index of every confidence."""
    edges = bin_edges(n_bins)
    idx = np.searchsorted(edges, confidences, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def bin_predictions(confidences, correct, n_bins: int = DEFAULT_BINS) -> list[BinStats]:
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != hit.shape:
        raise ValidationError(f"{conf.size} confidences but {hit.size} correctness flags")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValidationError("confidences must lie in [0, 1]")
    edges = bin_edges(n_bins)
    idx = assign_bins(conf, n_bins)
    out = []
    for m in range(n_bins):
        members = idx == m
        count = int(members.sum())
        if count:
            acc = int(hit[members].sum()) / count
            c = conf[members]
            # a mean stays within its members even after rounding
            mean_conf = min(max(math.fsum(c) / count, float(c.min())), float(c.max()))
        else:
            acc = mean_conf = 0.0
        out.append(BinStats(m + 1, float(edges[m]), float(edges[m + 1]), count, acc, mean_conf))
    return out


def _check_n(bins, n: int) -> None:
    if n <= 0:
        raise ValidationError("calibration error is undefined for zero predictions")
    total = sum(b.count for b in bins)
    if total != n:
        raise ValidationError(f"bin counts sum to {total}, expected {n}")


def ece(bins, n: int) -> float:
    _check_n(bins, n)
    return math.fsum(b.count / n * abs(b.acc - b.conf) for b in bins)


def oe(bins, n: int) -> float:
    _check_n(bins, n)
    return math.fsum(b.count / n * (b.conf * max(b.conf - b.acc, 0.0)) for b in bins)


def report_from_probs(probs: np.ndarray, labels, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = probs.shape[0]
    if n == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    winning = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = bin_predictions(winning, correct, n_bins)
    true_p = np.maximum(probs[np.arange(n), labels], NLL_FLOOR)
    return CalibrationReport(
        bins=bins,
        ece=ece(bins, n),
        oe=oe(bins, n),
        nll=float(-np.mean(np.log(true_p))),
        accuracy=float(np.mean(correct)),
        mean_winning_score=float(np.mean(winning)),
        n=n,
    )


def evaluate(model: nn.MlpModel, dataset, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """Eval-mode calibration report of ``model`` on a labelled dataset."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    return report_from_probs(nn.predict_proba(model, dataset.features), dataset.labels, n_bins)


# ---------------------------------------------------------------------------
# per-epoch tracking


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    mean_conf: float
    acc: float
    ece: float
    train_loss: float


@dataclass
class EpochTracker:
    n_bins: int = DEFAULT_BINS
    rows: list = field(default_factory=list)

    def track_epoch(self, model: nn.MlpModel, val_dataset, epoch: int,
                    train_loss: float = float("nan")) -> EpochRow:
        if self.rows and epoch <= self.rows[-1].epoch:
            raise ValidationError(f"epoch {epoch} does not follow {self.rows[-1].epoch}")
        rep = evaluate(model, val_dataset, self.n_bins)
        row = EpochRow(epoch, rep.mean_winning_score, rep.accuracy, rep.ece, float(train_loss))
        self.rows.append(row)
        return row


def write_epochs_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_conf", "acc", "ece", "train_loss"])
        for r in rows:
            w.writerow([r.epoch, repr(r.mean_conf), repr(r.acc), repr(r.ece), repr(r.train_loss)])


def read_epochs_csv(path) -> list[EpochRow]:
    with open(path, newline="") as fh:
        return [EpochRow(int(r["epoch"]), float(r["mean_conf"]), float(r["acc"]),
                         float(r["ece"]), float(r["train_loss"]))
                for r in csv.DictReader(fh)]


def write_reliability_csv(report: CalibrationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "acc", "conf"])
        for b in report.bins:
            w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.acc), repr(b.conf)])


def write_report(report: CalibrationReport, path, extra: Optional[dict] = None) -> None:
    """JSON report with a fixed key order: scalars first, then the bin table."""
    doc = dict(extra or {})
    doc.update(report.scalars())
    doc["bins"] = [
        {"m": b.m, "lo": b.lo, "hi": b.hi, "count": b.count, "acc": b.acc, "conf": b.conf}
        for b in report.bins
    ]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# temperature scaling


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    bounds: tuple
    nll: float


def temperature_nll(logits: np.ndarray, labels, temperature) -> np.ndarray:
    """Mean NLL of softmax(logits / T); vectorized over an array of T."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    t = np.atleast_1d(np.asarray(temperature, dtype=np.float64))
    scaled = z[None, :, :] / t[:, None, None]
    logp = nn.log_softmax(scaled)
    true = logp[:, np.arange(z.shape[0]), labels]
    out = -true.mean(axis=1)
    return out if np.ndim(temperature) else out[0]


def fit_temperature(val_logits, val_labels, bounds=TEMPERATURE_BOUNDS) -> TemperatureFit:
    """Grid search at 0.01 resolution, then bounded scalar refinement."""
    z = np.asarray(val_logits, dtype=np.float64)
    labels = np.asarray(val_labels)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValidationError("temperature fitting needs a non-empty (n, K) logit array")
    if labels.shape != (z.shape[0],):
        raise ValidationError("one label per logit row required")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0 < lo <= hi:
        raise ValidationError(f"bad temperature bounds {bounds}")
    # k / 100 keeps T = 1.0 exactly on the grid
    grid = np.arange(math.ceil(lo * 100), math.floor(hi * 100) + 1) / 100
    grid = np.unique(np.concatenate([grid, [lo, hi]]))
    nlls = np.concatenate([temperature_nll(z, labels, chunk)
                           for chunk in np.array_split(grid, max(1, grid.size // 50))])
    best = int(np.argmin(nlls))
    t_best, nll_best = float(grid[best]), float(nlls[best])

    a = max(lo, t_best - TEMPERATURE_STEP)
    b = min(hi, t_best + TEMPERATURE_STEP)
    if b > a:
        res = minimize_scalar(lambda t: float(temperature_nll(z, labels, t)), bounds=(a, b),
                              method="bounded", options={"xatol": 1e-6})
        if res.success and res.fun < nll_best:
            t_best, nll_best = float(res.x), float(res.fun)
    return TemperatureFit(t_best, (lo, hi), nll_best)


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return nn.softmax(np.asarray(logits, dtype=np.float64) / temperature)


# ---------------------------------------------------------------------------
# MC dropout


def mc_dropout_predict(model: nn.MlpModel, x, passes: int, rng: np.random.Generator) -> np.ndarray:
    """Average softmax over ``passes`` train-mode forward passes."""
    if passes < 1:
        raise ValidationError(f"need at least one pass, got {passes}")
    if model.dropout == 0.0:
        return nn.predict_proba(model, x)
    total = np.zeros((np.shape(x)[0], model.n_classes))
    for _ in range(passes):
        total += nn.softmax(nn.forward(model, x, nn.TRAIN, rng)[0].value)
    return total / passes
