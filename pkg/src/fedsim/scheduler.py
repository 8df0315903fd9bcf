"""Observation-window controller: frozen selection, prediction feedback, window sizing.

Selection only happens at window boundaries. Between boundaries the window
accumulates each participant's effective bandwidth and round durations;
at a boundary the accumulated data drive a reward/penalty factor per client,
a long-term-greedy re-selection, and a multiplicative window-size update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Collection, Mapping

import numpy as np

from .errors import (
    InvalidDuration,
    InvalidPrediction,
    NonPositiveFactor,
    UnknownClient,
    WindowNotComplete,
)
from .predictor import DEFAULT_MAX_HISTORY, BandwidthHistory, PredictorSpec, normalize, predict
from .selection import Feedback, SelectionPolicy, compute_utility, select_greedy


@dataclass(frozen=True)
class SchedulerConfig:
    """Thresholds and window bounds for the windowed controller.

    ``d_high`` / ``d_slow`` default to ``2T`` / ``T/2`` once the preferred
    duration ``T`` is known (see :meth:`resolved`). ``use_prediction=False``
    pins every bandwidth factor to 1; ``adaptive_window=False`` keeps ``W``
    at ``w_init``.
    """

    th_low: float = 0.3
    th_high: float = 0.8
    c: float = 0.0
    d_high: float | None = None
    d_slow: float | None = None
    w_init: int = 5
    w_min: int = 2
    w_max: int = 20
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    adaptive_window: bool = True
    use_prediction: bool = True
    stale_decay: float = 0.98
    max_history: int = DEFAULT_MAX_HISTORY

    def __post_init__(self):
        # 0 and 1 are admitted as "never trigger" settings for either branch
        if not 0.0 <= self.th_low < self.th_high <= 1.0:
            raise ValueError("thresholds must satisfy 0 <= th_low < th_high <= 1")
        if not 1 <= self.w_min <= self.w_init <= self.w_max:
            raise ValueError("window bounds must satisfy 1 <= w_min <= w_init <= w_max")
        if self.d_high is not None and self.d_slow is not None and not 0 < self.d_slow < self.d_high:
            raise ValueError("duration thresholds must satisfy 0 < d_slow < d_high")
        if not 0.0 < self.stale_decay <= 1.0:
            raise ValueError("stale_decay must lie in (0, 1]")

    def resolved(self, preferred_duration: float) -> "SchedulerConfig":
        d_high = self.d_high if self.d_high is not None else 2.0 * preferred_duration
        d_slow = self.d_slow if self.d_slow is not None else 0.5 * preferred_duration
        return replace(self, d_high=d_high, d_slow=d_slow)


@dataclass
class WindowState:
    W: int
    W_bounds: tuple[int, int]
    rounds_in_window: int = 0
    bw_history: dict[str, BandwidthHistory] = field(default_factory=dict)
    duration_accum: dict[str, list] = field(default_factory=dict)
    round_durations: list[float] = field(default_factory=list)
    max_history: int = DEFAULT_MAX_HISTORY

    @classmethod
    def initial(cls, cfg: SchedulerConfig) -> "WindowState":
        return cls(W=cfg.w_init, W_bounds=(cfg.w_min, cfg.w_max), max_history=cfg.max_history)

    @property
    def frozen(self) -> bool:
        return self.rounds_in_window > 0

    def record_bandwidth(self, client_id: str, bw: float) -> None:
        hist = self.bw_history.get(client_id)
        if hist is None:
            hist = self.bw_history[client_id] = BandwidthHistory(client_id, maxlen=self.max_history)
        hist.append(bw)

    def check(self) -> None:
        """Assert the structural invariants; used by fuzz tests."""
        lo, hi = self.W_bounds
        assert lo <= self.W <= hi, (self.W, self.W_bounds)
        assert 0 <= self.rounds_in_window < self.W, (self.rounds_in_window, self.W)
        assert self.frozen == (self.rounds_in_window > 0)


def observe_round(
    state: WindowState,
    round_report: Mapping[str, tuple[float, float]],
    round_duration: float | None = None,
    population: Collection[str] | None = None,
) -> WindowState:
    """Fold one round of ``client -> (duration, effective_bw)`` into the window."""
    if population is not None:
        unknown = [cid for cid in round_report if cid not in population]
        if unknown:
            raise UnknownClient(f"round report names unknown clients {unknown}")
    for cid in sorted(round_report):
        duration, bw = round_report[cid]
        state.record_bandwidth(cid, bw)
        acc = state.duration_accum.setdefault(cid, [0.0, 0])
        acc[0] += duration
        acc[1] += 1
    if round_duration is not None:
        state.round_durations.append(round_duration)
    state.rounds_in_window = (state.rounds_in_window + 1) % state.W
    return state


def long_term_durations(state: WindowState) -> dict[str, float]:
    """Mean duration per client over the rounds it joined in the closed window."""
    if state.frozen:
        raise WindowNotComplete(
            f"window at round {state.rounds_in_window} of {state.W}; durations not final"
        )
    return {cid: total / count for cid, (total, count) in sorted(state.duration_accum.items())}


def feedback_factor(alpha_pred: float, cfg: SchedulerConfig) -> float:
    """Reward/penalty multiplier for a normalized bandwidth forecast.

    Each branch is offset so it equals 1 at its own threshold:
    ``-ln(1-a) + 1 + ln(1-TH_H) + c`` above ``TH_H`` and ``exp(a - TH_L + c)``
    below ``TH_L``; in between the factor is 1.
    """
    if not 0.0 <= alpha_pred <= 1.0:
        raise InvalidPrediction(f"normalized prediction {alpha_pred} outside [0, 1]")
    if alpha_pred >= cfg.th_high:
        if alpha_pred >= 1.0:
            raise InvalidPrediction("reward branch diverges at a normalized prediction of 1")
        return -math.log(1.0 - alpha_pred) + (1.0 + math.log(1.0 - cfg.th_high)) + cfg.c
    if alpha_pred <= cfg.th_low:
        return math.exp(alpha_pred - cfg.th_low + cfg.c)
    return 1.0


def bandwidth_weight(alpha_pred: float, cfg: SchedulerConfig) -> float:
    """The bandwidth term folded into the utility formula.

    Rescaled so the penalty threshold maps to 1: forecasts at or above
    ``TH_L`` leave the utility untouched, weaker ones scale it down
    proportionally.
    """
    if cfg.th_low <= 0.0 or alpha_pred >= cfg.th_low:
        return 1.0
    return alpha_pred / cfg.th_low


def apply_feedback(
    feedback: Mapping[str, Feedback], factors: Mapping[str, float]
) -> dict[str, Feedback]:
    """Scale utility up and duration down by each client's factor."""
    out = dict(feedback)
    for cid, f in factors.items():
        if not f > 0:
            raise NonPositiveFactor(f"factor for {cid} is {f}")
        if cid in out:
            fb = out[cid]
            out[cid] = replace(fb, utility=fb.utility * f, duration=fb.duration / f)
    return out


def adjust_window(W: int, d: float, cfg: SchedulerConfig) -> int:
    """Shrink the window after slow rounds, grow it after fast ones."""
    if not d > 0:
        raise InvalidDuration(f"window duration must be positive, got {d}")
    if cfg.d_high is None or cfg.d_slow is None:
        raise ValueError("duration thresholds unresolved; call SchedulerConfig.resolved(T)")
    w = float(W)
    if d >= cfg.d_high:
        w = w * cfg.d_high / d
    elif d <= cfg.d_slow:
        w = w * cfg.d_slow / d
    return int(min(max(math.floor(w + 0.5), cfg.w_min), cfg.w_max))


@dataclass
class ClientRecord:
    """What the server knows about a client from its latest participation."""

    report: object  # LocalTrainReport-like: per_sample_losses, sample_count
    duration: float
    last_round: int
    last_step: int


def base_feedback(
    records: Mapping[str, ClientRecord],
    policy: SelectionPolicy,
    step: int,
    stale_decay: float,
    durations: Mapping[str, float] | None = None,
    weights: Mapping[str, float] | None = None,
) -> dict[str, Feedback]:
    """Utility per observed client, decayed by selection steps since it last took part.

    ``durations`` overrides the stored last-round duration (long-term means);
    ``weights`` supplies the bandwidth term, defaulting to 1.
    """
    out = {}
    for cid in sorted(records):
        rec = records[cid]
        t = durations.get(cid, rec.duration) if durations else rec.duration
        F = weights.get(cid, 1.0) if weights else 1.0
        stale = max(0, step - rec.last_step - 1)
        u = compute_utility(rec.report, t, F, policy)
        if stale:
            u *= stale_decay**stale
        out[cid] = Feedback(cid, u, t, rec.last_round)
    return out


@dataclass
class BoundaryDecision:
    cohort: list[str]
    predictions: dict[str, float]
    normalized: dict[str, float]
    factors: dict[str, float]
    feedback: dict[str, Feedback]
    window_before: int
    window_after: int


def window_boundary_step(
    state: WindowState,
    records: Mapping[str, ClientRecord],
    population: Collection[str],
    policy: SelectionPolicy,
    cfg: SchedulerConfig,
    rng: np.random.Generator,
    step: int,
) -> tuple[BoundaryDecision, WindowState]:
    """Predict, re-weight, select the next window's cohort, and resize the window.

    ``cfg`` must already carry resolved duration thresholds when the
    window is adaptive.
    """
    lt = long_term_durations(state)

    predictions: dict[str, float] = {}
    normalized: dict[str, float] = {}
    factors: dict[str, float] = {}
    weights: dict[str, float] = {}
    if cfg.use_prediction:
        for cid in sorted(records):
            hist = state.bw_history.get(cid)
            if hist is not None and len(hist):
                predictions[cid] = predict(cfg.predictor, hist)
        if predictions:
            normalized = normalize(predictions)
            for cid, a in normalized.items():
                factors[cid] = feedback_factor(a, cfg)
                weights[cid] = bandwidth_weight(a, cfg)

    feedback = base_feedback(records, policy, step, cfg.stale_decay, durations=lt, weights=weights)
    feedback = apply_feedback(feedback, factors)
    cohort = select_greedy(feedback, population, policy, rng)

    before = state.W
    if cfg.adaptive_window and state.round_durations:
        d = float(np.mean(state.round_durations))
        state.W = adjust_window(state.W, d, cfg)
    state.duration_accum = {}
    state.round_durations = []
    state.rounds_in_window = 0
    return BoundaryDecision(cohort, predictions, normalized, factors, feedback, before, state.W), state
