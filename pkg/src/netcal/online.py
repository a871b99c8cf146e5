"""Streaming detection over mixed event streams: windowing, EMA smoothing, thresholding, TTD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .score import nearest_rank_threshold
from .synth import Scenario, generate

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


@dataclass
class OnlineDetectorState:
    """Per-stream detector state. ``v`` is None until the first window is scored."""

    alpha: float
    threshold: float
    v: Optional[float] = None
    buffer: List[int] = field(default_factory=list)
    windows_seen: int = 0
    first_alert: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


def ema_update(state: OnlineDetectorState, score: float) -> float:
    """``v_t = alpha * c_t + (1 - alpha) * v_{t-1}``; the first score seeds ``v``."""
    if not math.isfinite(score):
        raise ValueError(f"non-finite score {score}")
    if state.v is None:
        state.v = float(score)
    else:
        state.v = state.alpha * score + (1.0 - state.alpha) * state.v
    return state.v


def ema_series(scores: Sequence[float], alpha: float, v0: Optional[float] = None) -> np.ndarray:
    state = OnlineDetectorState(alpha=alpha, threshold=math.inf, v=v0)
    return np.array([ema_update(state, float(c)) for c in scores])


def set_threshold(benign_scores: Sequence[float], contamination: float) -> float:
    """Nearest-rank upper ``1 - contamination`` quantile of benign scores."""
    return nearest_rank_threshold(benign_scores, contamination)


def smoothed_threshold(train_scores: Sequence[float], alpha: float, contamination: float) -> float:
    """Threshold on the EMA-smoothed benign training scores, matching what the stream will see."""
    return set_threshold(ema_series(train_scores, alpha), contamination)


def calibrate_alpha(benign_traces: Sequence[Sequence[float]], anomalous_traces: Sequence[Sequence[float]],
                    contamination: float, grid: Sequence[float] = ALPHA_GRID, tol: float = 1e-12) -> float:
    """Grid-search the smoothing weight maximising detection rate minus false-alert rate.

    For each alpha every score trace is smoothed on its own, the threshold is
    the benign smoothed quantile, and rates are window fractions above it.
    Ties (within ``tol``) go to the larger alpha.
    """
    if not grid:
        raise ValueError("empty alpha grid")
    if not benign_traces or not anomalous_traces:
        raise ValueError("need at least one benign and one anomalous trace")
    best_alpha, best_obj = None, -math.inf
    for alpha in sorted(grid, reverse=True):
        benign = np.concatenate([ema_series(t, alpha) for t in benign_traces])
        anomalous = np.concatenate([ema_series(t, alpha) for t in anomalous_traces])
        thr = set_threshold(benign, contamination)
        obj = float((anomalous > thr).mean() - (benign > thr).mean())
        logger.debug("alpha %.2f: objective %.4f", alpha, obj)
        if obj > best_obj + tol:
            best_alpha, best_obj = alpha, obj
    return best_alpha


@dataclass
class Alert:
    timestamp: float
    window: int
    score: float
    raw_score: float

    def line(self) -> str:
        return f"ALERT ts={self.timestamp:.6f} window={self.window} score={self.score:.6f}"


@dataclass
class WindowScore:
    window: int
    timestamp: float
    raw_score: float
    smoothed: float
    alert: bool


def stream_scores(state: OnlineDetectorState, events: Iterable, models) -> Iterator[WindowScore]:
    """Score each completed window of the event stream in arrival order.

    ``models`` supplies ``window_length``, ``token_id(record)`` and
    ``score_windows(ids)``; no PID information is consulted. Every window
    is reported; ``alert`` marks those whose smoothed score exceeds the
    threshold.
    """
    L = models.window_length
    for rec in events:
        state.buffer.append(models.token_id(rec))
        if len(state.buffer) < L:
            continue
        ids = np.asarray(state.buffer, dtype=np.int64)[None]
        state.buffer = []
        raw = float(models.score_windows(ids)[0])
        v = ema_update(state, raw)
        idx = state.windows_seen
        state.windows_seen += 1
        alert = v > state.threshold
        if alert and state.first_alert is None:
            state.first_alert = (idx, rec.timestamp)
        yield WindowScore(idx, rec.timestamp, raw, v, alert)


def stream_detect(state: OnlineDetectorState, events: Iterable, models) -> Iterator[Alert]:
    for w in stream_scores(state, events, models):
        if w.alert:
            yield Alert(w.timestamp, w.window, w.smoothed, w.raw_score)


@dataclass
class TTDRun:
    seed: int
    detected: bool
    detection_time: Optional[float]
    ttd: Optional[float]
    window_lag: Optional[int]
    windows: int
    alerts: int


@dataclass
class TTDReport:
    injection_time: float
    runs: List[TTDRun]

    @property
    def detected(self) -> int:
        return sum(r.detected for r in self.runs)

    @property
    def ttds(self) -> List[float]:
        return [r.ttd for r in self.runs if r.detected]

    @property
    def mean_ttd(self) -> Optional[float]:
        return float(np.mean(self.ttds)) if self.ttds else None

    @property
    def std_ttd(self) -> Optional[float]:
        return float(np.std(self.ttds)) if self.ttds else None

    def summary(self) -> str:
        if not self.ttds:
            return f"not detected [{self.detected}/{len(self.runs)}]"
        return f"{self.mean_ttd:.3f} ± {self.std_ttd:.3f} s [{self.detected}/{len(self.runs)}]"


def measure_ttd(scenario: Scenario, models, runs: int, alpha: float, threshold: float,
                kind="packet", seed_base: int = 0) -> TTDReport:
    """Replay the scenario ``runs`` times with fresh seeds and time the first post-injection alert.

    ``window_lag`` counts windows from the one holding the first event at or
    after injection to the alerting window (0 = that same window).
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    inj = scenario.injection_time
    out = []
    for r in range(runs):
        seed = seed_base + r
        trace = generate(scenario.reseeded(seed), kind)
        L = models.window_length
        first_post = next((i for i, rec in enumerate(trace.records) if rec.timestamp >= inj), None)
        inj_window = None if first_post is None else first_post // L
        state = OnlineDetectorState(alpha=alpha, threshold=threshold)
        hit, alerts = None, 0
        for w in stream_scores(state, trace.records, models):
            if w.alert:
                alerts += 1
                if hit is None and w.timestamp >= inj:
                    hit = w
        if hit is None:
            out.append(TTDRun(seed, False, None, None, None, state.windows_seen, alerts))
        else:
            out.append(TTDRun(seed, True, hit.timestamp, hit.timestamp - inj,
                              hit.window - inj_window, state.windows_seen, alerts))
    return TTDReport(injection_time=inj, runs=out)
