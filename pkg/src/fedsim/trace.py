"""Bandwidth traces: parsing, client binding, and step-function transfer timing.

A trace is a zero-order-hold throughput series that loops modulo its
duration. Transfer times are solved exactly against the cumulative-bytes
curve, so they are closed-form rather than stepped.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np

from .errors import (
    EmptyInput,
    EmptyTrace,
    MalformedLine,
    NonMonotonicTime,
    StalledTransfer,
)

DEFAULT_STALL_TIMEOUT = 3600.0
TRACE_FORMATS = ("canonical", "hsdpa")


@dataclass(frozen=True, eq=False)
class BandwidthTrace:
    """Throughput samples ``(t seconds, bytes/second)`` held piecewise constant.

    The last sample lasts one sampling interval (the median gap between
    samples, or 1 s for a single-sample trace), after which the trace wraps.
    """

    trace_id: str
    times: np.ndarray
    bw: np.ndarray
    interval: float = field(init=False)
    duration: float = field(init=False)
    # cumulative bytes at each sample start; cum[-1] is bytes per period
    cum: np.ndarray = field(init=False, repr=False)
    zero_runs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        bw = np.asarray(self.bw, dtype=np.float64)
        if times.ndim != 1 or times.shape != bw.shape:
            raise ValueError("times and bw must be 1-D arrays of equal length")
        if times.size == 0:
            raise EmptyTrace(f"trace {self.trace_id!r} has no samples")
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(~np.isfinite(bw)) or np.any(bw < 0):
            raise ValueError("bandwidth samples must be finite and non-negative")
        times.setflags(write=False)
        bw.setflags(write=False)
        interval = float(np.median(np.diff(times))) if times.size > 1 else 1.0
        duration = float(times[-1]) + interval
        seg_len = np.diff(np.append(times, duration))
        cum = np.concatenate(([0.0], np.cumsum(bw * seg_len)))
        cum.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "bw", bw)
        object.__setattr__(self, "interval", interval)
        object.__setattr__(self, "duration", duration)
        object.__setattr__(self, "cum", cum)
        object.__setattr__(self, "zero_runs", _zero_runs(times, bw, duration))

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.bw.tolist()))

    @property
    def period_bytes(self) -> float:
        return float(self.cum[-1])

    @property
    def mean_bandwidth(self) -> float:
        """Time-averaged throughput over one period."""
        return self.period_bytes / self.duration

    def __len__(self) -> int:
        return int(self.times.size)


def _zero_runs(times: np.ndarray, bw: np.ndarray, duration: float) -> tuple:
    """Maximal zero-bandwidth plateaus as ``(begin, end)`` within one period.

    A plateau touching the period end is merged with one at the start, so
    ``end`` may exceed ``duration``.
    """
    ends = np.append(times[1:], duration)
    runs = []
    begin = None
    for k in range(times.size):
        if bw[k] == 0.0:
            if begin is None:
                begin = float(times[k])
            last_end = float(ends[k])
        elif begin is not None:
            runs.append([begin, last_end])
            begin = None
    if begin is not None:
        runs.append([begin, last_end])
    if len(runs) > 1 and runs[0][0] == 0.0 and runs[-1][1] == duration:
        head = runs.pop(0)
        runs[-1][1] = duration + head[1]
    return tuple((b, e) for b, e in runs)


# -- parsing -----------------------------------------------------------------


def parse_trace(
    raw: str | TextIO, format: str = "canonical", trace_id: str = "trace"
) -> BandwidthTrace:
    """Parse a trace from text.

    ``canonical``: one ``t_seconds,bytes_per_second`` pair per line.
    ``hsdpa``: whitespace columns; column index 1 is a millisecond timestamp,
    column index 4 the bytes received in the interval, and the optional
    column index 5 the interval length in milliseconds (otherwise taken from
    timestamp gaps).

    Blank lines and lines starting with ``#`` are skipped. Timestamps are
    re-based so the first sample sits at ``t = 0``.
    """
    stream = io.StringIO(raw) if isinstance(raw, str) else raw
    if format == "canonical":
        times, bws = _parse_canonical(stream)
    elif format in ("hsdpa", "hsdpa-style"):
        times, bws = _parse_hsdpa(stream)
    else:
        raise ValueError(f"unknown trace format {format!r}")
    if not times:
        raise EmptyTrace(f"trace {trace_id!r} has no valid samples")
    t = np.asarray(times, dtype=np.float64)
    return BandwidthTrace(trace_id, t - t[0], np.asarray(bws, dtype=np.float64))


def _rows(stream: Iterable[str]):
    for line_no, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        yield line_no, text


def _parse_canonical(stream):
    times: list[float] = []
    bws: list[float] = []
    for line_no, text in _rows(stream):
        parts = text.split(",")
        if len(parts) != 2:
            raise MalformedLine(line_no, text)
        try:
            t, bw = float(parts[0]), float(parts[1])
        except ValueError:
            raise MalformedLine(line_no, text) from None
        if not (math.isfinite(t) and math.isfinite(bw)) or bw < 0:
            raise MalformedLine(line_no, text)
        if times and t <= times[-1]:
            raise NonMonotonicTime(line_no)
        times.append(t)
        bws.append(bw)
    return times, bws


def _parse_hsdpa(stream):
    stamps: list[float] = []
    nbytes: list[float] = []
    gaps: list[float | None] = []
    for line_no, text in _rows(stream):
        cols = text.split()
        if len(cols) < 5:
            raise MalformedLine(line_no, text)
        try:
            ms = float(cols[1])
            b = float(cols[4])
            gap = float(cols[5]) if len(cols) > 5 else None
        except ValueError:
            raise MalformedLine(line_no, text) from None
        if not (math.isfinite(ms) and math.isfinite(b)) or b < 0:
            raise MalformedLine(line_no, text)
        if gap is not None and not (math.isfinite(gap) and gap > 0):
            gap = None
        if stamps and ms <= stamps[-1]:
            raise NonMonotonicTime(line_no)
        stamps.append(ms)
        nbytes.append(b)
        gaps.append(gap)
    diffs = np.diff(stamps) if len(stamps) > 1 else np.array([1000.0])
    bws = []
    for k, (b, gap) in enumerate(zip(nbytes, gaps)):
        if gap is None:
            gap = float(diffs[k - 1] if k > 0 else diffs[0])
        bws.append(b / (gap / 1000.0))
    return [ms / 1000.0 for ms in stamps], bws


def load_trace_file(path: str | Path, format: str = "canonical") -> BandwidthTrace:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh, format=format, trace_id=path.stem)


def load_trace_dir(path: str | Path, format: str = "canonical") -> dict[str, BandwidthTrace]:
    """Load every non-hidden regular file in ``path`` keyed by file stem."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise EmptyInput(f"no trace files in {path}")
    return {p.stem: load_trace_file(p, format) for p in files}


def format_trace(trace: BandwidthTrace) -> str:
    """Serialize in canonical format; ``parse_trace`` reads it back exactly."""
    return "".join(f"{t!r},{b!r}\n" for t, b in zip(trace.times.tolist(), trace.bw.tolist()))


def write_trace(path: str | Path, trace: BandwidthTrace) -> None:
    Path(path).write_text(format_trace(trace), encoding="utf-8")


# -- client binding ------------------------------------------------------------


def assign_traces(client_ids: Iterable[str], trace_ids: Iterable[str]) -> dict[str, str]:
    """Division-method hashing: the k-th sorted client gets trace ``k mod n``."""
    clients = sorted(set(client_ids))
    traces = sorted(set(trace_ids))
    if not clients or not traces:
        raise EmptyInput("assign_traces needs at least one client and one trace")
    n = len(traces)
    return {cid: traces[k % n] for k, cid in enumerate(clients)}


@dataclass(frozen=True)
class TraceStore:
    traces: Mapping[str, BandwidthTrace]
    assignment: Mapping[str, str]

    @classmethod
    def build(cls, traces: Mapping[str, BandwidthTrace], client_ids: Iterable[str]) -> "TraceStore":
        return cls(dict(traces), assign_traces(client_ids, traces.keys()))

    def trace_for(self, client_id: str) -> BandwidthTrace:
        return self.traces[self.assignment[client_id]]


# -- queries -------------------------------------------------------------------


def _phase(trace: BandwidthTrace, t: float) -> tuple[int, float]:
    """Split absolute time into (period index, offset within period)."""
    n = math.floor(t / trace.duration)
    phi = t - n * trace.duration
    if phi >= trace.duration:  # float guard
        n, phi = n + 1, 0.0
    return n, max(phi, 0.0)


def _bytes_to(trace: BandwidthTrace, phi: float) -> float:
    """Bytes delivered from period start to offset ``phi`` (0 <= phi <= duration)."""
    k = int(np.searchsorted(trace.times, phi, side="right")) - 1
    return float(trace.cum[k] + trace.bw[k] * (phi - trace.times[k]))


def bandwidth_at(trace: BandwidthTrace, t: float) -> float:
    """Step-interpolated throughput at time ``t`` (wraps modulo duration)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    _, phi = _phase(trace, t)
    k = int(np.searchsorted(trace.times, phi, side="right")) - 1
    return float(trace.bw[k])


def bytes_between(trace: BandwidthTrace, start: float, end: float) -> float:
    """Integral of ``bandwidth_at`` over ``[start, end]``."""
    n0, p0 = _phase(trace, start)
    n1, p1 = _phase(trace, end)
    return (n1 - n0) * trace.period_bytes + _bytes_to(trace, p1) - _bytes_to(trace, p0)


def transfer_time(
    trace: BandwidthTrace,
    start: float,
    nbytes: float,
    timeout: float = DEFAULT_STALL_TIMEOUT,
) -> float:
    """Seconds needed to move ``nbytes`` starting at ``start``.

    Raises StalledTransfer when a zero-bandwidth plateau longer than
    ``timeout`` lies in the way.
    """
    if nbytes < 0 or start < 0:
        raise ValueError("start and nbytes must be non-negative")
    if nbytes == 0:
        return 0.0
    P = trace.period_bytes
    _, x = _phase(trace, start)
    if P == 0.0:
        raise StalledTransfer(timeout, 0.0, timeout)
    # local coordinates: x in [0, D); the answer is y - x
    target = _bytes_to(trace, x) + nbytes
    n = math.ceil(target / P) - 1
    r = target - n * P
    if r <= 0.0:  # float guard on the ceil
        n, r = n - 1, r + P
    j = int(np.searchsorted(trace.cum, r, side="left")) - 1
    j = min(max(j, 0), len(trace) - 1)
    y = n * trace.duration + float(trace.times[j]) + (r - float(trace.cum[j])) / float(trace.bw[j])
    _check_stall(trace, x, y, timeout)
    return y - x


def _check_stall(trace: BandwidthTrace, x: float, y: float, timeout: float) -> None:
    D = trace.duration
    first = None
    for b, e in trace.zero_runs:
        if e - b <= timeout:
            continue
        k = math.floor((x - e) / D)
        while b + k * D < y:
            lo = max(x, b + k * D)
            hi = min(y, e + k * D)
            if hi - lo > timeout:
                if first is None or lo < first:
                    first = lo
                break
            k += 1
    if first is not None:
        done = bytes_between(trace, x, first)
        raise StalledTransfer(first - x + timeout, done, timeout)


# -- synthetic trace families ------------------------------------------------


def constant_trace(trace_id: str, bw: float) -> BandwidthTrace:
    return BandwidthTrace(trace_id, np.array([0.0]), np.array([float(bw)]))


def static_version(trace: BandwidthTrace) -> BandwidthTrace:
    """Constant trace at the time-averaged throughput of ``trace``."""
    return constant_trace(trace.trace_id, trace.mean_bandwidth)


def synthetic_trace(
    trace_id: str,
    rng: np.random.Generator,
    mean_bw: float,
    duration_s: int = 1800,
    corr_time: float = 30.0,
    log_sd: float = 0.6,
    outage_rate: float = 0.01,
    outage_mean_s: float = 40.0,
    outage_depth: float = 0.05,
) -> BandwidthTrace:
    """Per-second mobile-link surrogate.

    Log-throughput follows a stationary AR(1) around ``log(mean_bw)`` with
    correlation time ``corr_time``; Poisson-arriving outages (tunnels, cell
    edges) scale throughput by ``outage_depth`` for an exponential duration.
    """
    n = int(duration_s)
    phi = math.exp(-1.0 / corr_time) if corr_time > 0 else 0.0
    innov = rng.standard_normal(n) * log_sd * math.sqrt(1 - phi * phi)
    z = np.empty(n)
    z[0] = rng.standard_normal() * log_sd
    for k in range(1, n):
        z[k] = phi * z[k - 1] + innov[k]
    # centre so the log-normal mean matches mean_bw before outages
    bw = mean_bw * np.exp(z - 0.5 * log_sd**2)
    if outage_rate > 0:
        t = rng.exponential(1 / outage_rate)
        while t < n:
            length = rng.exponential(outage_mean_s)
            a, b = int(t), min(n, int(math.ceil(t + length)))
            bw[a:b] *= outage_depth
            t += length + rng.exponential(1 / outage_rate)
    return BandwidthTrace(trace_id, np.arange(n, dtype=np.float64), bw)


def sinusoid_trace(
    trace_id: str,
    rng: np.random.Generator,
    n: int = 400,
    mean_bw: float = 2e6,
    amplitude: float = 0.5,
    period: float = 20.0,
    noise: float = 0.02,
) -> BandwidthTrace:
    """Sinusoid-plus-noise throughput; ``amplitude`` and ``noise`` are fractions of the mean."""
    t = np.arange(n, dtype=np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    bw = mean_bw * (1 + amplitude * np.sin(2 * math.pi * t / period + phase))
    bw = bw + mean_bw * noise * rng.standard_normal(n)
    return BandwidthTrace(trace_id, t, np.clip(bw, 0.0, None))
