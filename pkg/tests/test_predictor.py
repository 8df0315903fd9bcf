import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import EmptyCohort, EmptyHistory, TraceTooShort
from fedsim.predictor import BandwidthHistory, PredictorSpec, normalize, predict, prediction_error

from . import oracles

AR2 = PredictorSpec("windowed-ar", order=2, fit_window=10)


def test_last_value():
    assert predict(PredictorSpec("last-value"), [5, 7, 9]) == 9


def test_ar_reproduces_ramp():
    assert predict(AR2, [1, 2, 3, 4, 5]) == pytest.approx(6.0, abs=1e-6)


def test_ar_short_history_falls_back_to_last_value():
    assert predict(AR2, [4.0, 2.0]) == 2.0


def test_ewma_unit_decay_is_last_value():
    assert predict(PredictorSpec("ewma", decay=1.0), [3, 8]) == 8


def test_ewma_hand_value():
    # s = 3, then 0.5*8 + 0.5*3 = 5.5, then 0.5*1 + 0.5*5.5 = 3.25
    assert predict(PredictorSpec("ewma", decay=0.5), [3, 8, 1]) == pytest.approx(3.25)


def test_ar_is_clamped_at_zero():
    # a steep downward ramp extrapolates below zero
    assert predict(AR2, [45, 35, 25, 15, 5]) == 0.0


def test_empty_history():
    with pytest.raises(EmptyHistory):
        predict(PredictorSpec(), [])
    with pytest.raises(EmptyHistory):
        predict(PredictorSpec(), BandwidthHistory("c0"))


def test_history_is_bounded():
    h = BandwidthHistory("c0", range(10), maxlen=4)
    assert list(h) == [6, 7, 8, 9]
    with pytest.raises(ValueError):
        h.append(-1.0)


@pytest.mark.parametrize(
    "preds, expect",
    [
        ({"a": 0, "b": 10}, {"a": 0.05, "b": 0.95}),
        ({"a": 4, "b": 4, "c": 4}, {"a": 0.5, "b": 0.5, "c": 0.5}),
        ({"a": 0, "b": 5, "c": 10}, {"a": 0.05, "b": 0.5, "c": 0.95}),
    ],
)
def test_normalize_examples(preds, expect):
    got = normalize(preds)
    assert got.keys() == expect.keys()
    for k in expect:
        assert got[k] == pytest.approx(expect[k], abs=1e-12)


def test_normalize_rejects_bad_input():
    with pytest.raises(EmptyCohort):
        normalize({})
    with pytest.raises(ValueError):
        normalize({"a": -1.0, "b": 2.0})


def test_prediction_error_constant_is_zero():
    tr = np.full(40, 3e6)
    for spec in (PredictorSpec("last-value"), PredictorSpec("ewma"), AR2):
        for w in (1, 3, 10):
            assert prediction_error(spec, tr, w) == 0.0


def test_prediction_error_ramp_is_zero_for_ar():
    ramp = np.arange(1.0, 60.0)
    for w in (5, 8, 10):
        assert prediction_error(AR2, ramp, w) == pytest.approx(0.0, abs=1e-6)


def test_prediction_error_short_trace():
    with pytest.raises(TraceTooShort):
        prediction_error(AR2, np.ones(15), 10)


def test_prediction_error_sinusoid_window_ordering():
    from fedsim.trace import sinusoid_trace

    for seed in range(5):
        tr = sinusoid_trace("s", np.random.default_rng([seed, 99]))
        assert prediction_error(AR2, tr, 20) < prediction_error(AR2, tr, 2)


# -- properties ----------------------------------------------------------------

histories = st.lists(st.floats(0, 1e8), min_size=1, max_size=30)
specs = st.sampled_from(
    [PredictorSpec("last-value"), PredictorSpec("ewma", decay=0.3), AR2, PredictorSpec("windowed-ar", order=1, fit_window=4)]
)


@settings(max_examples=300, deadline=None)
@given(spec=specs, hist=histories)
def test_predict_never_negative(spec, hist):
    assert predict(spec, hist) >= 0.0


@settings(max_examples=200, deadline=None)
@given(hist=histories)
def test_ewma_one_equals_last_value(hist):
    assert predict(PredictorSpec("ewma", decay=1.0), hist) == predict(PredictorSpec("last-value"), hist)


@settings(max_examples=300, deadline=None)
@given(preds=st.dictionaries(st.text("abcdef", min_size=1, max_size=3), st.floats(0, 1e9, allow_subnormal=False), min_size=1, max_size=20))
def test_normalize_preserves_order(preds):
    got = normalize(preds)
    ref = oracles.normalize(preds)
    span = max(preds.values()) - min(preds.values())
    for a in preds:
        assert 0.05 <= got[a] <= 0.95
        assert got[a] == pytest.approx(ref[a], rel=1e-12, abs=1e-12)
        for b in preds:
            if preds[b] - preds[a] > 1e-12 * span:
                assert got[a] < got[b]
            elif preds[a] < preds[b]:
                # gaps below float resolution of the [0.05, 0.95] band
                assert got[a] <= got[b]
            elif preds[a] == preds[b]:
                assert got[a] == got[b]


@settings(max_examples=100, deadline=None)
@given(
    a1=st.floats(-0.9, 0.9),
    a2=st.floats(-0.5, 0.5),
    x0=st.floats(1.0, 10.0),
    x1=st.floats(1.0, 10.0),
)
def test_error_non_increasing_in_window_on_noiseless_ar(a1, a2, x0, x1):
    # stationary-ish noiseless AR(2) with an offset; windows that fit the
    # recurrence exactly must not do worse than shorter ones
    if abs(a2) + abs(a1) >= 0.95:
        a1 = a1 * 0.5
        a2 = a2 * 0.5
    x = [x0, x1]
    for _ in range(60):
        x.append(5.0 + a1 * (x[-1] - 5.0) + a2 * (x[-2] - 5.0))
    series = np.array(x)
    spec = PredictorSpec("windowed-ar", order=2, fit_window=10)
    errs = [prediction_error(spec, series, w) for w in (5, 7, 10)]
    scale = float(np.abs(series).max())
    for lo, hi in zip(errs[1:], errs[:-1]):
        assert lo <= hi + 1e-6 * scale
