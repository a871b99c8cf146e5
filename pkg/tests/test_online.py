from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcal.online import (
    OnlineDetectorState, calibrate_alpha, ema_series, ema_update, set_threshold, smoothed_threshold,
    stream_detect, stream_scores,
)


def test_ema_examples():
    np.testing.assert_allclose(ema_series([1, 0, 0], 0.5, v0=0.0), [0.5, 0.25, 0.125])
    np.testing.assert_array_equal(ema_series([0.3, 0.9, 0.1], 1.0), [0.3, 0.9, 0.1])
    assert ema_series([0.7] * 200, 0.1, v0=0.0)[-1] == pytest.approx(0.7, abs=1e-8)


def test_first_score_seeds_state():
    s = OnlineDetectorState(alpha=0.2, threshold=1.0)
    assert ema_update(s, 0.4) == 0.4
    assert ema_update(s, 0.9) == pytest.approx(0.2 * 0.9 + 0.8 * 0.4)
    with pytest.raises(ValueError):
        ema_update(s, float("nan"))
    with pytest.raises(ValueError):
        OnlineDetectorState(alpha=0.0, threshold=1.0)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.01, 1.0), scores=st.lists(st.floats(0, 1), min_size=1, max_size=100))
def test_ema_matches_closed_form(alpha, scores):
    v = ema_series(scores, alpha)
    t = len(scores) - 1
    closed = (1 - alpha) ** t * scores[0] + sum(alpha * (1 - alpha) ** (t - k) * scores[k] for k in range(1, t + 1))
    assert abs(v[-1] - closed) < 1e-9


def test_threshold_examples():
    assert set_threshold(list(range(1, 101)), 0.01) == 99
    sym = [-2, -1, 0, 1, 2]
    assert set_threshold(sym, 0.5) == 0
    assert set_threshold([0.42], 0.015) == 0.42


def test_smoothed_threshold_alpha_one_is_plain():
    s = np.random.default_rng(0).random(300)
    assert smoothed_threshold(s, 1.0, 0.05) == set_threshold(s, 0.05)


def test_calibrate_separable_returns_one():
    rng = np.random.default_rng(1)
    benign = [rng.uniform(0.3, 0.5, 200)]
    anomalous = [rng.uniform(0.7, 0.9, 50)]
    assert calibrate_alpha(benign, anomalous, 0.015) == 1.0


def test_calibrate_identical_returns_largest():
    rng = np.random.default_rng(2)
    x = rng.random(200)
    assert calibrate_alpha([x], [x.copy()], 0.015) == 1.0


def test_calibrate_prefers_smoothing_against_benign_spikes():
    rng = np.random.default_rng(3)
    benign = rng.normal(0.0, 0.1, 2000)
    benign[rng.random(2000) < 0.03] += 3.0   # isolated one-window spikes
    anomalous = rng.normal(0.6, 0.1, 400)   # sustained, moderate shift
    assert calibrate_alpha([benign], [anomalous], 0.015) < 1.0


def test_smaller_alpha_never_alerts_earlier_on_step():
    scores = np.r_[np.zeros(50), np.ones(50)]
    firsts = []
    for alpha in (0.1, 0.3, 0.6, 1.0):
        v = ema_series(scores, alpha)
        firsts.append(int(np.argmax(v > 0.5)))
    assert firsts == sorted(firsts, reverse=True)


class _StubModels:
    """Token id is the record's pid; window score is the mean id."""

    window_length = 3

    def token_id(self, rec):
        return rec.pid

    def score_windows(self, ids):
        return np.asarray(ids).mean(axis=1)


def _events(pids):
    return [SimpleNamespace(pid=p, timestamp=float(i)) for i, p in enumerate(pids)]


def test_stream_shorter_than_window_never_alerts():
    state = OnlineDetectorState(alpha=1.0, threshold=-1.0)
    assert list(stream_detect(state, _events([1, 2]), _StubModels())) == []
    assert state.windows_seen == 0


def test_stream_alpha_one_matches_offline_flags():
    pids = np.random.default_rng(4).integers(0, 10, size=300)
    models = _StubModels()
    offline = models.score_windows(pids.reshape(-1, 3)) > 5.0
    state = OnlineDetectorState(alpha=1.0, threshold=5.0)
    online = [w.alert for w in stream_scores(state, _events(pids), models)]
    assert online == offline.tolist()
    alerts = list(stream_detect(OnlineDetectorState(alpha=1.0, threshold=5.0), _events(pids), models))
    assert [a.window for a in alerts] == np.flatnonzero(offline).tolist()
    assert alerts[0].line().startswith(f"ALERT ts={alerts[0].timestamp:.6f} window=")
