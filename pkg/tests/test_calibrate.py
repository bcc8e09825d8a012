import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from mixcal import calibrate, nn
from mixcal.data import Dataset
from mixcal.errors import ValidationError
from oracles import brute_force_calibration

HAND_CONF = [0.6, 0.7, 0.8, 0.9]
HAND_CORRECT = [1, 0, 1, 1]


def _random_fixture(r):
    n = int(r.integers(1, 300))
    conf = r.uniform(0, 1, n)
    # put a few values exactly on bin edges
    edges = r.integers(0, 16, n) / 15
    pick = r.random(n) < 0.2
    conf[pick] = edges[pick]
    return conf, r.random(n) < conf


# --- binning -----------------------------------------------------------------


def test_hand_fixture():
    bins = calibrate.bin_predictions(HAND_CONF, HAND_CORRECT, 4)
    b3, b4 = bins[2], bins[3]
    assert (b3.count, b3.acc) == (2, 0.5) and b3.conf == pytest.approx(0.65, abs=1e-15)
    assert (b4.count, b4.acc) == (2, 1.0) and b4.conf == pytest.approx(0.85, abs=1e-15)
    assert calibrate.ece(bins, 4) == pytest.approx(0.15, abs=1e-12)
    assert calibrate.oe(bins, 4) == pytest.approx(0.04875, abs=1e-12)


def test_empty_and_single_bin(rng):
    bins = calibrate.bin_predictions([], [], 5)
    assert all(b.count == 0 and b.acc == 0 and b.conf == 0 for b in bins)
    conf = rng.uniform(0, 1, 50)
    hit = rng.random(50) < 0.5
    (only,) = calibrate.bin_predictions(conf, hit, 1)
    assert only.acc == hit.mean() and only.conf == pytest.approx(conf.mean(), abs=1e-15)


def test_right_closed_edges():
    idx = calibrate.assign_bins(np.array([0.0, 0.25, 0.2500001, 0.5, 1.0]), 4)
    np.testing.assert_array_equal(idx, [0, 0, 1, 1, 3])


def test_metric_examples():
    bins = calibrate.bin_predictions([1.0] * 5, [True] * 5, 10)
    assert calibrate.ece(bins, 5) == 0.0
    bins = calibrate.bin_predictions([1.0] * 5, [False] * 5, 10)
    assert calibrate.oe(bins, 5) == 1.0
    bins = calibrate.bin_predictions([0.55, 0.6], [True, True], 10)
    assert calibrate.oe(bins, 2) == 0.0


def test_metric_errors():
    bins = calibrate.bin_predictions(HAND_CONF, HAND_CORRECT, 4)
    with pytest.raises(ValidationError):
        calibrate.ece(bins, 5)
    with pytest.raises(ValidationError):
        calibrate.ece(calibrate.bin_predictions([], [], 4), 0)
    with pytest.raises(ValidationError):
        calibrate.bin_predictions([1.2], [True], 4)
    with pytest.raises(ValidationError):
        calibrate.bin_edges(0)


@pytest.mark.parametrize("m", [1, 4, 10, 15])
def test_metrics_match_brute_force(m):
    r = np.random.default_rng(m)
    for _ in range(50):
        conf, hit = _random_fixture(r)
        bins = calibrate.bin_predictions(conf, hit, m)
        want_ece, want_oe = brute_force_calibration(conf, hit, m)
        assert calibrate.ece(bins, conf.size) == want_ece
        assert calibrate.oe(bins, conf.size) == want_oe


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 20))
def test_metric_invariants(seed, m):
    conf, hit = _random_fixture(np.random.default_rng(seed))
    bins = calibrate.bin_predictions(conf, hit, m)
    e, o = calibrate.ece(bins, conf.size), calibrate.oe(bins, conf.size)
    assert 0 <= e <= 1 and 0 <= o <= e + 1e-15
    assert sum(b.count for b in bins) == conf.size
    for b in bins:
        if b.count:
            assert b.lo < b.conf <= b.hi or (b.m == 1 and b.conf >= 0)
    # sample order does not matter
    order = np.random.default_rng(seed).permutation(conf.size)
    assert calibrate.ece(calibrate.bin_predictions(conf[order], hit[order], m), conf.size) == e


# --- reports -----------------------------------------------------------------


def _fixed_model(logits_for_rows):
    """An identity network whose logits are the input features."""
    k = logits_for_rows.shape[1]
    return nn.MlpModel([k, k], [np.eye(k)], [np.zeros(k)])


def test_report_matches_hand_fixture():
    # two-class logits whose softmax winning scores are the hand confidences
    p = np.array(HAND_CONF)
    logits = np.stack([np.log(p), np.log(1 - p)], axis=1)
    labels = np.array([0, 1, 0, 0])
    ds = Dataset(logits, labels, 2)
    report = calibrate.evaluate(_fixed_model(logits), ds, 4)
    assert report.ece == pytest.approx(0.15, abs=1e-12)
    assert report.oe == pytest.approx(0.04875, abs=1e-12)
    assert report.accuracy == 0.75
    assert sum(report.winning_score_histogram) == 4
    assert report.nll == pytest.approx(-np.mean(np.log([0.6, 0.3, 0.8, 0.9])), abs=1e-12)


def test_uniform_predictor_is_calibrated():
    k = 4
    ds = Dataset(np.zeros((400, k)), np.repeat(np.arange(k), 100), k)
    report = calibrate.evaluate(_fixed_model(np.zeros((1, k))), ds)
    assert report.mean_winning_score == pytest.approx(1 / k, abs=1e-15)
    # argmax of a tie is class 0, so accuracy is exactly 1/K here
    assert report.accuracy == 1 / k
    assert report.ece == pytest.approx(0.0, abs=1e-15)


def test_evaluate_is_pure(rng):
    model = nn.init_mlp([3, 8, 2], rng)
    ds = Dataset(rng.normal(size=(40, 3)), rng.integers(0, 2, 40), 2)
    a, b = calibrate.evaluate(model, ds), calibrate.evaluate(model, ds)
    assert a.scalars() == b.scalars()


def test_untrained_model_is_near_uniform(rng):
    model = nn.init_mlp([5, 32, 4], rng)
    for w in model.weights:
        w *= 1e-3
    ds = Dataset(rng.normal(size=(100, 5)), rng.integers(0, 4, 100), 4)
    row = calibrate.EpochTracker().track_epoch(model, ds, 1, 0.0)
    assert row.mean_conf == pytest.approx(0.25, abs=1e-3)


def test_tracker_rows_strictly_increase(rng):
    model = nn.init_mlp([2, 4, 2], rng)
    ds = Dataset(rng.normal(size=(10, 2)), rng.integers(0, 2, 10), 2)
    tracker = calibrate.EpochTracker()
    tracker.track_epoch(model, ds, 1, 0.5)
    tracker.track_epoch(model, ds, 2, 0.4)
    with pytest.raises(ValidationError):
        tracker.track_epoch(model, ds, 2, 0.3)
    assert [r.epoch for r in tracker.rows] == [1, 2]


def test_epochs_csv_round_trip(tmp_path, rng):
    rows = [calibrate.EpochRow(e, rng.random(), rng.random(), rng.random(), rng.random()) for e in (1, 2, 3)]
    calibrate.write_epochs_csv(rows, tmp_path / "e.csv")
    assert calibrate.read_epochs_csv(tmp_path / "e.csv") == rows
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "epoch,mean_conf,acc,ece,train_loss"


# --- temperature -------------------------------------------------------------


def test_apply_temperature_examples():
    np.testing.assert_array_equal(calibrate.apply_temperature([[2.0, 0.0]], 1.0), nn.softmax([[2.0, 0.0]]))
    np.testing.assert_allclose(calibrate.apply_temperature([[2.0, 0.0]], 2.0), [[0.7311, 0.2689]], atol=1e-4)
    flat = calibrate.apply_temperature([[2.0, 0.0]], 1e6)
    np.testing.assert_allclose(flat, [[0.5, 0.5]], atol=1e-5)
    assert flat[0, 0] > flat[0, 1]
    with pytest.raises(ValidationError):
        calibrate.apply_temperature([[1.0, 0.0]], 0.0)


def test_single_sample_goes_to_lower_bound():
    fit = calibrate.fit_temperature(np.array([[2.0, 0.0]]), np.array([0]))
    assert fit.temperature == 0.05
    t = np.linspace(0.05, 10, 200)
    assert np.all(np.diff(calibrate.temperature_nll(np.array([[2.0, 0.0]]), [0], t)) > 0)


def test_calibrated_logits_fit_unit_temperature():
    # labels drawn from softmax(z) make T = 1 the population optimum
    r = np.random.default_rng(0)
    z = r.normal(0, 2, size=(40_000, 3))
    p = nn.softmax(z)
    labels = (r.random(len(z))[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    fit = calibrate.fit_temperature(z, labels)
    assert abs(fit.temperature - 1.0) <= 0.05


def _brute_force_temperature(z, labels):
    """Argmin of the validation NLL over a 1e-4 grid, via scipy's logsumexp."""
    grid = np.arange(500, 100001) / 10000
    true = z[np.arange(len(z)), labels]
    best_t, best = None, math.inf
    for chunk in np.array_split(grid, 100):
        scaled = z[None] / chunk[:, None, None]
        nll = np.mean(logsumexp(scaled, axis=2) - true[None] / chunk[:, None], axis=1)
        i = int(np.argmin(nll))
        if nll[i] < best:
            best_t, best = float(chunk[i]), float(nll[i])
    return best_t


@pytest.mark.parametrize("seed", range(5))
def test_fit_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    z = r.normal(0, r.uniform(0.5, 5), size=(100, 4))
    labels = r.integers(0, 4, 100)
    labels[: 50] = z[:50].argmax(axis=1)
    fit = calibrate.fit_temperature(z, labels)
    assert abs(fit.temperature - _brute_force_temperature(z, labels)) <= 0.01
    assert fit.nll <= float(calibrate.temperature_nll(z, labels, 1.0)) + 1e-12
    assert 0.05 <= fit.temperature <= 10.0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(1e-3, 1e3))
def test_temperature_keeps_winning_class(seed, t):
    z = np.random.default_rng(seed).normal(0, 3, size=(20, 5))
    np.testing.assert_array_equal(calibrate.apply_temperature(z, t).argmax(axis=1), z.argmax(axis=1))


def test_fit_errors():
    with pytest.raises(ValidationError):
        calibrate.fit_temperature(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValidationError):
        calibrate.fit_temperature(np.zeros((2, 2)), np.zeros(3, dtype=int))


# --- MC dropout --------------------------------------------------------------


def test_mc_dropout_without_dropout_is_eval(rng):
    model = nn.init_mlp([3, 8, 2], rng)
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(calibrate.mc_dropout_predict(model, x, 7, rng), nn.predict_proba(model, x))


def test_mc_dropout_variance_shrinks():
    model = nn.init_mlp([3, 32, 3], np.random.default_rng(0), dropout=0.5)
    x = np.random.default_rng(1).normal(size=(1, 3))
    r = np.random.default_rng(2)
    one = np.array([calibrate.mc_dropout_predict(model, x, 1, r)[0, 0] for _ in range(2000)])
    ten = np.array([calibrate.mc_dropout_predict(model, x, 10, r)[0, 0] for _ in range(2000)])
    ratio = ten.var(ddof=1) / one.var(ddof=1)
    assert 0.07 < ratio < 0.14
    np.testing.assert_allclose(calibrate.mc_dropout_predict(model, x, 10, r).sum(), 1.0, atol=1e-12)
    with pytest.raises(ValidationError):
        calibrate.mc_dropout_predict(model, x, 0, r)


def test_report_writers(tmp_path):
    report = calibrate.report_from_probs(np.array([[0.6, 0.4], [0.3, 0.7]]), [0, 0], 4)
    calibrate.write_report(report, tmp_path / "r.json", {"seed": 3})
    text = (tmp_path / "r.json").read_text()
    assert text.index('"seed"') < text.index('"ece"') < text.index('"bins"')
    calibrate.write_reliability_csv(report, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,acc,conf" and len(lines) == 5
    assert math.isclose(report.accuracy, 0.5)
