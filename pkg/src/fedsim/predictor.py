"""Next-round bandwidth forecasts from per-client observation histories."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyCohort, EmptyHistory, TraceTooShort
from .trace import BandwidthTrace

PREDICTOR_KINDS = ("last-value", "ewma", "windowed-ar")
NORM_EPS = 0.05
DEFAULT_MAX_HISTORY = 64


@dataclass(frozen=True)
class PredictorSpec:
    """Which forecaster to run and its parameters.

    ``decay`` is the EWMA weight on the newest value; ``order`` and
    ``fit_window`` configure the windowed AR fit.
    """

    kind: str = "ewma"
    decay: float = 0.5
    order: int = 2
    fit_window: int = 10

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ValueError(f"predictor kind must be one of {PREDICTOR_KINDS}, got {self.kind!r}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("ewma decay must lie in (0, 1]")
        if self.order < 1:
            raise ValueError("ar order must be >= 1")
        if self.fit_window < self.order + 1:
            raise ValueError("ar fit_window must be >= order + 1")


class BandwidthHistory:
    """Bounded record of one client's observed effective bandwidths."""

    def __init__(self, client_id: str, values: Iterable[float] = (), maxlen: int = DEFAULT_MAX_HISTORY):
        self.client_id = client_id
        self.values: deque[float] = deque(maxlen=maxlen)
        for v in values:
            self.append(v)

    def append(self, value: float) -> None:
        if not value >= 0:
            raise ValueError(f"bandwidth observation must be non-negative, got {value}")
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __repr__(self) -> str:
        return f"BandwidthHistory({self.client_id!r}, n={len(self)})"


def predict(spec: PredictorSpec, history: BandwidthHistory | Sequence[float]) -> float:
    """Forecast the next value of ``history``; never negative."""
    values = list(history)
    if not values:
        raise EmptyHistory("cannot predict from an empty history")
    if spec.kind == "last-value":
        out = values[-1]
    elif spec.kind == "ewma":
        out = _ewma(values, spec.decay)
    else:
        out = _ar_forecast(values[-spec.fit_window:], spec.order)
    return max(0.0, float(out))


def _ewma(values: Sequence[float], decay: float) -> float:
    s = values[0]
    for v in values[1:]:
        s = decay * v + (1.0 - decay) * s
    return s


def _ar_forecast(values: Sequence[float], p: int) -> float:
    """One-step forecast from an order-p autoregression with intercept.

    Needs ``p + 1`` regression rows to pin ``p + 1`` coefficients, i.e. at
    least ``2p + 1`` values; shorter windows fall back to the last value.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2 * p + 1:
        return float(x[-1])
    if np.all(x == x[0]):
        return float(x[0])
    scale = float(np.max(np.abs(x)))
    z = x / scale
    # row t regresses z[t] on (z[t-1], ..., z[t-p], 1)
    A = np.column_stack([z[p - k - 1 : n - k - 1] for k in range(p)] + [np.ones(n - p)])
    y = z[p:]
    # minimum-norm least squares copes with rank-deficient (e.g. ramp) windows
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    nxt = np.append(z[::-1][:p], 1.0)
    return float(nxt @ coef) * scale


def normalize(predictions: Mapping[str, float]) -> dict[str, float]:
    """Min-max scale forecasts over the cohort into ``[0.05, 0.95]``.

    An all-equal cohort maps to 0.5 everywhere.
    """
    if not predictions:
        raise EmptyCohort("cannot normalize an empty cohort")
    vals = predictions.values()
    if any(not v >= 0 for v in vals):
        raise ValueError("predictions must be non-negative")
    lo, hi = min(vals), max(vals)
    if hi == lo:
        return {cid: 0.5 for cid in predictions}
    span = hi - lo
    top = 1.0 - NORM_EPS
    return {
        cid: min(top, NORM_EPS + (1.0 - 2 * NORM_EPS) * (v - lo) / span)
        for cid, v in predictions.items()
    }


def prediction_error(spec: PredictorSpec, trace: BandwidthTrace | Sequence[float], window: int) -> float:
    """Mean absolute one-step error walking the trace with a sliding history of ``window`` samples."""
    series = np.asarray(trace.bw if isinstance(trace, BandwidthTrace) else trace, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if series.size - window < 10:
        raise TraceTooShort(f"need >= {window + 10} samples, got {series.size}")
    errors = [
        abs(predict(spec, series[i - window : i]) - series[i])
        for i in range(window, series.size)
    ]
    return float(np.mean(errors))
