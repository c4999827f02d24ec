import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracle import oracle_detect
from ssvtcn.data import DataError, SynthConfig, make_windows, synth_generate
from ssvtcn.detector import (
    ClassIntervals,
    DetectionResult,
    classify_by_pv,
    detect_one,
    detect_stream,
    intervals_from_scores,
    recon_probability,
    rectify,
    score_windows,
)
from ssvtcn.model import forward
from ssvtcn.nn_core import Tensor
from ssvtcn.pipeline import PipelineSettings, prepare, train
from ssvtcn.vae import gaussian_log_likelihood

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@pytest.fixture(scope="module")
def trained():
    records = synth_generate(SynthConfig(records=2500, seed=5))
    settings = PipelineSettings(epochs=1, labeled_fraction=0.3)
    prepared = prepare(records, settings)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _, intervals = train(prepared, settings, seed=2)
    return prepared, model, intervals


class FakeOutput:
    def __init__(self, emb, recon_emb, recon_raw):
        self.embedding = Tensor(emb)
        self.recon_embedding = Tensor(recon_emb)
        self.recon_raw = Tensor(recon_raw)


def test_recon_probability_examples():
    assert recon_probability(FakeOutput([0.5], [0.5], [2.0]), [2.0]) == pytest.approx(-2 * HALF_LOG_2PI, abs=1e-12)
    base = recon_probability(FakeOutput([0.5], [0.5], [2.0]), [2.0])
    assert recon_probability(FakeOutput([0.5], [0.9], [2.0]), [2.0]) < base
    assert recon_probability(FakeOutput([0.5], [0.5], [2.0]), [2.3]) < base


def test_recon_probability_is_additive():
    rng = np.random.default_rng(0)
    e, re, raw, rr = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    got = recon_probability(FakeOutput(e, re, rr), raw, 2.0)
    ref = gaussian_log_likelihood(e, re, 2.0).data + gaussian_log_likelihood(raw, rr, 2.0).data
    assert np.max(np.abs(got - ref)) < 1e-12


def intervals(lo, hi, center, threshold, M=4):
    counts = {c: 10 for c in center}
    return ClassIntervals(M, 0.05, lo, hi, center, counts, threshold)


def test_single_normal_record_calibration():
    with pytest.warns(UserWarning):
        iv = intervals_from_scores([-3.5], [0], 4)
    assert iv.lo[0] == iv.hi[0] == iv.center[0] == iv.normal_threshold == -3.5


def test_quantiles_on_explicit_list():
    iv = intervals_from_scores(np.arange(1.0, 101.0), np.zeros(100, int), 4)
    assert iv.lo[0] == pytest.approx(5.95)
    assert iv.hi[0] == pytest.approx(95.05)
    assert iv.center[0] == pytest.approx(50.5)


@given(st.permutations(list(range(40))))
def test_calibration_ignores_record_order(order):
    rng = np.random.default_rng(1)
    scores = rng.normal(size=40)
    labels = rng.integers(0, 3, 40)
    labels[0] = 0
    a = intervals_from_scores(scores, labels, 3)
    idx = np.asarray(order)
    b = intervals_from_scores(scores[idx], labels[idx], 3)
    assert a.to_dict() == b.to_dict()


def test_calibration_edge_cases():
    with pytest.raises(ValueError, match="normal"):
        intervals_from_scores([1.0], [1], 4)
    with pytest.warns(UserWarning, match="fewer than"):
        iv = intervals_from_scores([1.0, 2.0, 3.0], [0, 0, 2], 4)
    assert iv.sparse_classes == [0, 2]
    assert 1 not in iv.center


def test_intervals_serialize():
    iv = intervals({0: -5.0, 2: -20.0}, {0: -1.0, 2: -15.0}, {0: -3.0, 2: -17.0}, -5.0)
    back = ClassIntervals.loads(iv.dumps())
    assert back == iv


def test_classify_by_pv():
    iv = intervals({0: -5, 1: -30, 2: -25}, {0: 0, 1: -22, 2: -21}, {0: -2, 1: -10, 2: -20}, -5.0)
    assert classify_by_pv(-1.0, iv) == 0
    assert classify_by_pv(-5.0, iv) == 0  # at the threshold counts as normal
    far = intervals({0: -5, 1: -100, 2: -100}, {0: 0, 1: -90, 2: -90}, {0: -2, 1: -10, 2: -20}, -5.0)
    assert classify_by_pv(-12.0, far) == 1
    inside = intervals({0: -5, 1: -9, 2: -30}, {0: 0, 1: -6, 2: -25}, {0: -2, 1: -7, 2: -27}, -5.0)
    assert classify_by_pv(-26.0, inside) == 2
    both = intervals({0: -5, 1: -40, 2: -40}, {0: 0, 1: -6, 2: -6}, {0: -2, 1: -10, 2: -30}, -5.0)
    assert classify_by_pv(-25.0, both) == 2
    tie = intervals({0: -5, 1: -100, 2: -100}, {0: 0, 1: -90, 2: -90}, {0: -2, 1: -10, 2: -20}, -5.0)
    assert classify_by_pv(-15.0, tie) == 1
    only_normal = intervals({0: -5}, {0: 0}, {0: -2}, -5.0)
    assert classify_by_pv(-50.0, only_normal) == 0


TABLE_I = [((0, 0), (0, False)), ((0, 2), (2, True)), ((1, 3), (1, False)), ((2, 0), (0, True))]


@pytest.mark.parametrize("pair, expected", TABLE_I)
def test_rectify_table_rows(pair, expected):
    assert rectify(*pair) == expected


def test_rectify_all_pairs():
    for pre in range(4):
        for pv in range(4):
            final, flag = rectify(pre, pv)
            if pre == 0:
                assert (final, flag) == ((0, False) if pv == 0 else (pv, True))
            elif pv == 0:
                assert (final, flag) == (0, True)
            else:
                assert (final, flag) == (pre, False)


def test_detection_result_json_round_trip():
    r = DetectionResult(1, -12.5, 0, 0, True, index=7, timestamp=1.5e12)
    line = r.to_json()
    assert set(json.loads(line)) == {"index", "timestamp", "preliminary", "p_v", "pv_class", "final", "rectified"}
    assert DetectionResult.from_json(line) == r
    plain = r.without_rectification()
    assert plain.final == 1 and not plain.rectified


def test_confident_normal_path(trained):
    prepared, model, iv = trained
    model = model.copy()
    model.tcn.head_weight.data[:] = 0
    model.tcn.head_bias.data[:] = [10.0, 0, 0, 0]
    window = prepared.labeled_windows[0]
    high = ClassIntervals(4, 0.05, {0: -1e9}, {0: 0.0}, {0: -1.0}, {0: 10}, -1e9)
    r = detect_one(model, high, window)
    assert (r.preliminary, r.pv_class, r.final, r.rectified) == (0, 0, 0, False)


def test_detect_one_is_deterministic(trained):
    prepared, model, iv = trained
    w = prepared.labeled_windows[10]
    assert detect_one(model, iv, w) == detect_one(model, iv, w)


def test_detect_one_matches_straight_line_oracle(trained):
    prepared, model, iv = trained
    state = model.state_dict()
    windows = make_windows(prepared.test_features, model.config.window, prepared.context)[:1000]
    assert len(windows) == 500
    windows = np.concatenate([windows, prepared.labeled_windows[:500]])
    agree = 0
    for w in windows:
        got = detect_one(model, iv, w)
        pre, p_v, pv_class, final, rectified = oracle_detect(
            state, model.config, iv.lo, iv.hi, iv.center, iv.normal_threshold, w)
        assert got.p_v == pytest.approx(p_v, rel=1e-9, abs=1e-9)
        agree += (got.preliminary, got.pv_class, got.final, got.rectified) == (pre, pv_class, final, rectified)
    assert agree == len(windows) == 1000


def test_stream_length_and_equivalence(trained):
    prepared, model, iv = trained
    feats = prepared.test_features
    results = detect_stream(model, iv, feats, prepared.test_timestamps, context=prepared.context)
    assert len(results) == len(feats)
    windows = make_windows(feats, model.config.window, prepared.context)
    for i in range(0, len(feats), 37):
        one = detect_one(model, iv, windows[i], index=i, timestamp=prepared.test_timestamps[i])
        assert one.final == results[i].final and one.preliminary == results[i].preliminary
        assert one.p_v == pytest.approx(results[i].p_v, abs=1e-9)


def test_stream_prefix_is_stable(trained):
    prepared, model, iv = trained
    feats = prepared.test_features
    head = detect_stream(model, iv, feats[:300], batch_size=128)
    full = detect_stream(model, iv, feats[:400], batch_size=128)
    assert [r.to_json() for r in full[:300]] == [r.to_json() for r in head]


def test_stream_rejects_unordered_timestamps(trained):
    _, model, iv = trained
    with pytest.raises(DataError, match="order"):
        detect_stream(model, iv, np.zeros((3, model.config.input_dim)), [1.0, 3.0, 2.0])
    assert detect_stream(model, iv, np.zeros((0, model.config.input_dim))) == []


def test_rectification_switch(trained):
    prepared, model, iv = trained
    on = detect_stream(model, iv, prepared.test_features)
    off = detect_stream(model, iv, prepared.test_features, rectification=False)
    assert [r.preliminary for r in on] == [r.final for r in off]
    assert not any(r.rectified for r in off)
    assert [r.without_rectification() for r in on] == off


def test_score_windows_matches_forward(trained):
    prepared, model, _ = trained
    w = prepared.labeled_windows[:5]
    probs, pv = score_windows(model, w, batch_size=2)
    out = forward(model, w)
    np.testing.assert_allclose(probs, out.probs.data, atol=1e-14)
    np.testing.assert_allclose(pv, recon_probability(out, w[:, -1, :], model.config.sigma), atol=1e-10)
