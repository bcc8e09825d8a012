"""Command-line experiment runner.

Every subcommand reads an INI config, writes into an output directory that
must be empty (or absent), and echoes the resolved config there as
``config.ini``. Exit codes: 0 success, 1 validation or usage error, 2 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from mixcal import augment, calibrate, data, nn, ood, train
from mixcal.config import ExperimentConfig, defaults_help, dump_config, load_config, validate
from mixcal.errors import FormatError, UsageError, ValidationError

REPORT_KEYS = ("accuracy", "ece", "oe", "nll", "mean_winning_score")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return float(v.mean()), std


# ---------------------------------------------------------------------------
# setup shared by the subcommands


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed:
        cfg = cfg.with_("run", seeds=tuple(args.seed))
    if args.out:
        cfg = cfg.with_("run", out=args.out)
    return validate(cfg)


def _open_out(cfg: ExperimentConfig) -> Path:
    out = train.ensure_empty_dir(cfg.run.out)
    (out / "config.ini").write_text(dump_config(cfg))
    return out


def _load_models(args) -> list[tuple[str, nn.MlpModel]]:
    if not args.model:
        raise UsageError(f"{args.command} needs a trained model: pass --model PATH")
    models = []
    for path in args.model:
        if not Path(path).is_file():
            raise UsageError(f"model file {path} does not exist")
        models.append((path, train.load_model(path)))
    return models


def _check_model_fits(model: nn.MlpModel, splits: train.Splits) -> None:
    if model.layer_sizes[0] != splits.train.dim or model.n_classes != splits.train.n_classes:
        raise ValidationError(
            f"model maps {model.layer_sizes[0]} features to {model.n_classes} classes, "
            f"dataset has {splits.train.dim} features and {splits.train.n_classes} classes")


def _model_names(paths) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"{i}_{s}" for i, s in enumerate(stems)]


def _fit_temperature(model: nn.MlpModel, val: data.Dataset) -> calibrate.TemperatureFit:
    return calibrate.fit_temperature(nn.predict_logits(model, val.features), val.labels)


def _train_and_report(cfg: ExperimentConfig, splits: train.Splits, seed: int, run_dir: Optional[Path]):
    result = train.train_model(cfg, splits, seed)
    model = result.checkpoint(cfg.metrics.checkpoint)
    report = calibrate.evaluate(model, splits.test if len(splits.test) else splits.val, cfg.metrics.bins)
    if run_dir is not None:
        run_dir.mkdir()
        train.save_model(result.model, run_dir / "model_final.json", {"seed": seed, "epoch": cfg.train.epochs})
        train.save_model(result.best_model, run_dir / "model_best.json", {"seed": seed, "epoch": result.best_epoch})
        calibrate.write_epochs_csv(result.rows, run_dir / "epochs.csv")
        extra = {"seed": seed, "checkpoint": cfg.metrics.checkpoint, "best_epoch": result.best_epoch}
        calibrate.write_report(report, run_dir / "report_test.json", extra)
        calibrate.write_reliability_csv(report, run_dir / "reliability_test.csv")
    return result, report


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> None:
    cfg = _resolve(args)
    splits = train.prepare_splits(cfg.dataset)
    out = _open_out(cfg)
    rows = []
    for seed in cfg.run.seeds:
        result, report = _train_and_report(cfg, splits, seed, out / f"seed_{seed}")
        rows.append([seed, result.best_epoch] + [getattr(report, k) for k in REPORT_KEYS])
    stats = [_mean_std([r[i + 2] for r in rows]) for i in range(len(REPORT_KEYS))]
    rows.append(["mean", ""] + [m for m, _ in stats])
    rows.append(["std", ""] + [s for _, s in stats])
    _write_rows(out / "summary.csv", ["seed", "best_epoch", *REPORT_KEYS], rows)


def cmd_evaluate(args) -> None:
    cfg = _resolve(args)
    splits = train.prepare_splits(cfg.dataset)
    models = _load_models(args)
    out = _open_out(cfg)
    names = _model_names([p for p, _ in models])
    rows = []
    for name, (path, model) in zip(names, models):
        _check_model_fits(model, splits)
        report = calibrate.evaluate(model, splits.test, cfg.metrics.bins)
        calibrate.write_report(report, out / f"report_{name}.json", {"model": str(path)})
        calibrate.write_reliability_csv(report, out / f"reliability_{name}.csv")
        rows.append([name] + [getattr(report, k) for k in REPORT_KEYS])
    _write_rows(out / "evaluate.csv", ["model", *REPORT_KEYS], rows)


def cmd_sweep_alpha(args) -> None:
    cfg = _resolve(args)
    alphas = cfg.sweep.alphas
    if len(alphas) < 2:
        raise ValidationError(f"sweep.alphas: need at least two alphas, got {alphas}")
    if cfg.smoothing.kind != "none":
        raise ValidationError("smoothing.kind: an alpha sweep cannot be combined with label smoothing")
    kind = cfg.mix.kind if cfg.mix.kind != "none" else "mixup"
    splits = train.prepare_splits(cfg.dataset)
    out = _open_out(cfg)
    rows, summary = [], []
    for alpha in alphas:
        run_cfg = cfg.with_("mix", kind=kind, alpha=alpha)
        reports = []
        for seed in cfg.run.seeds:
            _, report = _train_and_report(run_cfg, splits, seed, None)
            reports.append(report)
            rows.append([alpha, seed, report.accuracy, report.ece, report.oe])
        line = [alpha, len(reports)]
        for key in ("accuracy", "ece", "oe"):
            line.extend(_mean_std([getattr(r, key) for r in reports]))
        summary.append(line)
    _write_rows(out / "sweep.csv", ["alpha", "seed", "accuracy", "ece", "oe"], rows)
    _write_rows(out / "sweep_summary.csv",
                ["alpha", "n_seeds", "accuracy_mean", "accuracy_std", "ece_mean", "ece_std",
                 "oe_mean", "oe_std"], summary)


def _out_features(cfg: ExperimentConfig, splits: train.Splits) -> np.ndarray:
    spec = cfg.ood
    if spec.source == "gaussian":
        x = splits.train.features
        if spec.noise_stats == "feature":
            mean, var = x.mean(axis=0), x.var(axis=0)
        else:
            mean, var = np.full(x.shape[1], x.mean()), np.full(x.shape[1], x.var())
        return ood.gaussian_noise_like(mean, var, spec.n_noise, np.random.default_rng(spec.seed))
    if spec.source == "csv":
        if not spec.path:
            raise ValidationError("ood.path: required when source = csv")
        other = data.load_csv(spec.path, cfg.dataset.label_column)
    else:
        if not (spec.images and spec.labels):
            raise ValidationError("ood.images / ood.labels: required when source = idx")
        other = data.load_idx(spec.images, spec.labels)
    if other.dim != splits.train.dim:
        raise ValidationError(f"ood: out-of-distribution data has {other.dim} features, "
                              f"model expects {splits.train.dim}")
    if splits.train.normalization is not None:
        other = data.apply_normalization(other, *splits.train.normalization)
    return other.features


def _predictor(cfg: ExperimentConfig, model: nn.MlpModel, splits: train.Splits) -> tuple[ood.Predictor, dict]:
    spec = cfg.ood
    if spec.predictor == "temperature":
        if spec.temperature > 0:
            return ood.Predictor("temperature", spec.temperature, seed=spec.seed), {"temperature": spec.temperature}
        fit = _fit_temperature(model, splits.val)
        return ood.Predictor("temperature", fit.temperature, seed=spec.seed), {
            "temperature": fit.temperature, "val_nll": fit.nll}
    if spec.predictor == "mc_dropout":
        return ood.Predictor("mc_dropout", passes=spec.passes, seed=spec.seed), {"passes": spec.passes}
    return ood.Predictor("plain", seed=spec.seed), {}


def cmd_ood(args) -> None:
    cfg = _resolve(args)
    splits = train.prepare_splits(cfg.dataset)
    models = _load_models(args)
    for _, model in models:
        _check_model_fits(model, splits)
    out_x = _out_features(cfg, splits)
    out = _open_out(cfg)
    names = _model_names([p for p, _ in models])
    single = len(models) == 1
    for name, (path, model) in zip(names, models):
        predictor, info = _predictor(cfg, model, splits)
        report = ood.ood_evaluate(model, splits.test.features, out_x, predictor, cfg.metrics.bins)
        suffix = "" if single else f"_{name}"
        extra = {"model": str(path), "source": cfg.ood.source, **info}
        ood.write_ood_report(report, out / f"ood_hist{suffix}.csv", out / f"ood_summary{suffix}.json", extra)


def cmd_perturb(args) -> None:
    cfg = _resolve(args)
    splits = train.prepare_splits(cfg.dataset)
    models = _load_models(args)
    for _, model in models:
        _check_model_fits(model, splits)
    out = _open_out(cfg)
    sweeps, temps = {}, {}
    for name, (path, model) in zip(_model_names([p for p, _ in models]), models):
        fit = _fit_temperature(model, splits.val)
        temps[name] = {"model": str(path), "temperature": fit.temperature}
        for predictor in (ood.Predictor("plain"), ood.Predictor("temperature", fit.temperature)):
            # same direction seed for every predictor and model
            rng = np.random.default_rng(cfg.perturb.seed)
            sweeps[f"{name}:{predictor.kind}"] = ood.perturbation_sweep(
                model, splits.test, cfg.perturb.mu, cfg.perturb.directions, rng, predictor)
    ood.write_sweep_csv(sweeps, out / "perturb.csv")
    _write_json(out / "perturb_summary.json", {"n_classes": splits.test.n_classes, "models": temps})


def cmd_entropy_dist(args) -> None:
    cfg = _resolve(args)
    spec = cfg.entropy
    if spec.samples < 1 or spec.bins < 1:
        raise ValidationError("entropy.samples / entropy.bins: must be >= 1")
    out = _open_out(cfg)
    rows = []
    for alpha in spec.alphas:
        rng = np.random.default_rng(spec.seed)
        hist = augment.entropy_distribution(alpha, spec.samples, spec.collision_prob, rng, spec.bins)
        augment.write_histogram_csv(hist, out / f"entropy_alpha_{alpha!r}.csv")
        rows.append([alpha, hist.n, hist.mean, hist.standard_error])
    _write_rows(out / "entropy_summary.csv", ["alpha", "n", "mean_entropy", "standard_error"], rows)


COMMANDS = {
    "train": (cmd_train, "train one model per seed and report test calibration"),
    "evaluate": (cmd_evaluate, "calibration report of saved models on the test split"),
    "sweep-alpha": (cmd_sweep_alpha, "train and evaluate over the alpha grid and seeds"),
    "ood": (cmd_ood, "winning-score AUROC against out-of-distribution inputs"),
    "perturb": (cmd_perturb, "accuracy and confidence as test inputs move off the data"),
    "entropy-dist": (cmd_entropy_dist, "Monte Carlo histograms of mixed-label entropy"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixcal", description="Mixup calibration experiments.",
                     epilog=defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=defaults_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, metavar="PATH", help="INI experiment config")
        p.add_argument("--seed", type=int, action="append", metavar="N",
                       help="training seed (repeatable); overrides run.seeds")
        p.add_argument("--out", metavar="DIR", help="output directory; overrides run.out")
        p.add_argument("--model", action="append", metavar="PATH",
                       help="trained model file (repeatable)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command][0](args)
    except (ValidationError, UsageError) as exc:
        print(f"mixcal: error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"mixcal: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
