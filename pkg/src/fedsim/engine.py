"""Deterministic synchronous round loop and time-to-accuracy bookkeeping.

Each round: pick (or reuse) a cohort, train it locally, time every client's
download/compute/upload against its trace, aggregate the survivors, and
advance the simulated clock by the slowest survivor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, PolicyConfig
from .errors import AllClientsDropped, StalledTransfer
from .learner import (
    AggregatorState,
    DataPartition,
    GlobalModel,
    Population,
    aggregate,
    evaluate,
    generate_population,
    local_train_many,
)
from .scheduler import (
    ClientRecord,
    SchedulerConfig,
    WindowState,
    base_feedback,
    observe_round,
    window_boundary_step,
)
from .selection import SelectionPolicy, select_greedy, select_random
from .trace import (
    BandwidthTrace,
    TraceStore,
    load_trace_dir,
    static_version,
    synthetic_trace,
    transfer_time,
)

log = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
_DATA, _TRACES, _PROFILES, _SELECT, _TRAIN = range(5)


@dataclass(frozen=True)
class ClientProfile:
    client_id: str
    trace_id: str
    per_sample_compute_latency: float
    pull_bytes: float
    push_bytes: float
    partition: DataPartition = field(repr=False)


@dataclass(frozen=True)
class ClientTiming:
    comm_seconds: float
    comp_seconds: float
    effective_bw: float
    dropped: bool = False

    @property
    def total(self) -> float:
        return self.comm_seconds + self.comp_seconds

    def to_json(self) -> dict:
        return {
            "comm_s": self.comm_seconds,
            "comp_s": self.comp_seconds,
            "effective_bw": self.effective_bw,
            "dropped": self.dropped,
        }


@dataclass(frozen=True)
class RoundRecord:
    round: int
    wall_clock_start: float
    wall_clock_end: float
    cohort: tuple[str, ...]
    per_client: dict[str, ClientTiming]
    test_accuracy: float | None
    selection_frozen: bool
    window_size: int | None = None

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "wall_clock_start": self.wall_clock_start,
            "wall_clock_end": self.wall_clock_end,
            "cohort": list(self.cohort),
            "per_client": {cid: self.per_client[cid].to_json() for cid in self.cohort},
            "test_accuracy": self.test_accuracy,
            "selection_frozen": self.selection_frozen,
            "window_size": self.window_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoundRecord":
        per = {
            cid: ClientTiming(v["comm_s"], v["comp_s"], v["effective_bw"], v["dropped"])
            for cid, v in obj["per_client"].items()
        }
        return cls(
            obj["round"],
            obj["wall_clock_start"],
            obj["wall_clock_end"],
            tuple(obj["cohort"]),
            per,
            obj["test_accuracy"],
            obj["selection_frozen"],
            obj.get("window_size"),
        )


class SimClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def advance(self, dt: float) -> None:
        if not dt >= 0:
            raise ValueError(f"clock cannot move backwards (dt={dt})")
        self.now += dt


# -- world construction --------------------------------------------------------


@dataclass
class World:
    """Policy-independent pieces of a run: data, traces, client profiles."""

    population: Population
    store: TraceStore
    profiles: dict[str, ClientProfile]

    @property
    def client_ids(self) -> list[str]:
        return sorted(self.profiles)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def build_traces(config: ExperimentConfig, seed: int) -> dict[str, BandwidthTrace]:
    tc = config.traces
    if tc.source == "synthetic":
        rng = _rng(seed, _TRACES)
        n = tc.n_traces or config.population.n_clients
        lo, hi = tc.bandwidth_range
        traces = {}
        for k in range(n):
            mean_bw = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            tid = f"t{k:04d}"
            traces[tid] = synthetic_trace(
                tid,
                rng,
                mean_bw,
                duration_s=tc.duration_s,
                corr_time=tc.corr_time,
                log_sd=tc.log_sd,
                outage_rate=tc.outage_rate,
                outage_mean_s=tc.outage_mean_s,
                outage_depth=tc.outage_depth,
            )
        return traces
    return load_trace_dir(tc.source, tc.format)


def build_world(config: ExperimentConfig, seed: int, trace_mode: str | None = None) -> World:
    pc = config.population
    population = generate_population(
        seed=int(np.random.SeedSequence([seed, _DATA]).generate_state(1)[0]),
        n_clients=pc.n_clients,
        d=pc.dim,
        C=pc.n_classes,
        dirichlet_alpha=pc.dirichlet_alpha,
        samples_per_client_range=pc.samples_per_client,
        center_scale=pc.center_scale,
        test_size=pc.test_size,
    )
    traces = build_traces(config, seed)
    if (trace_mode or config.traces.mode) == "static":
        traces = {tid: static_version(tr) for tid, tr in traces.items()}
    store = TraceStore.build(traces, population.client_ids)
    rng = _rng(seed, _PROFILES)
    lo, hi = pc.compute_latency
    profiles = {}
    for part in population.partitions:
        latency = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        profiles[part.client_id] = ClientProfile(
            part.client_id,
            store.assignment[part.client_id],
            latency,
            pc.pull_bytes,
            pc.push_bytes,
            part,
        )
    return World(population, store, profiles)


# -- timing ------------------------------------------------------------------


def client_round_time(
    profile: ClientProfile,
    trace: BandwidthTrace,
    start: float,
    sample_count: int,
    epochs: int,
    timeout: float = 3600.0,
) -> tuple[float, float]:
    """``(comp_seconds, comm_seconds)`` for download, local compute, upload in sequence.

    A stall in either transfer propagates as StalledTransfer whose
    ``elapsed`` counts from ``start``.
    """
    comp = sample_count * epochs * profile.per_sample_compute_latency
    try:
        pull = transfer_time(trace, start, profile.pull_bytes, timeout)
    except StalledTransfer as exc:
        raise StalledTransfer(exc.elapsed, exc.bytes_done, timeout) from None
    try:
        push = transfer_time(trace, start + pull + comp, profile.push_bytes, timeout)
    except StalledTransfer as exc:
        raise StalledTransfer(pull + comp + exc.elapsed, profile.pull_bytes + exc.bytes_done, timeout) from None
    return comp, pull + push


def _time_client(profile, trace, start, sample_count, epochs, timeout) -> ClientTiming:
    total_bytes = profile.pull_bytes + profile.push_bytes
    try:
        comp, comm = client_round_time(profile, trace, start, sample_count, epochs, timeout)
    except StalledTransfer as exc:
        comp = sample_count * epochs * profile.per_sample_compute_latency
        # the stall clock includes compute when it hit during upload
        comm = exc.elapsed - (comp if exc.bytes_done >= profile.pull_bytes else 0.0)
        return ClientTiming(comm, comp, exc.bytes_done / comm if comm > 0 else 0.0, dropped=True)
    return ClientTiming(comm, comp, total_bytes / comm if comm > 0 else math.inf)


# -- time-to-accuracy ------------------------------------------------------------


def time_to_accuracy(curve: Sequence[tuple[int, float, float]], target: float) -> float | None:
    """Wall-clock at which accuracy first reaches ``target``.

    ``curve`` holds ``(round, wall_clock_s, accuracy)`` evaluation points;
    the crossing is interpolated linearly between the bracketing points.
    """
    prev = None
    for point in curve:
        _, t, acc = point
        if acc >= target:
            if prev is None:
                return t
            _, t0, a0 = prev
            return t0 + (target - a0) / (acc - a0) * (t - t0)
        prev = point
    return None


@dataclass
class ExperimentSummary:
    policy: str
    seed: int
    status: str
    rounds: int
    wall_clock_s: float
    final_accuracy: float | None
    milestones: dict[float, float | None]
    predictor_mae: float | None = None

    @property
    def reached_target(self) -> bool:
        return self.status == "target reached"


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    curve: list[tuple[int, float, float]]
    summary: ExperimentSummary
    cohorts_selected: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)


# -- the simulation --------------------------------------------------------------


class Simulation:
    """One (policy, seed) run over a fixed world.

    The control loop is the only mutator; per-client results are always
    merged in sorted client order.
    """

    def __init__(self, config: ExperimentConfig, policy: PolicyConfig, seed: int, world: World | None = None):
        self.config = config
        self.policy_cfg = policy
        self.seed = seed
        self.world = world or build_world(config, seed, trace_mode=policy.traces)
        self.client_ids = self.world.client_ids
        pc = config.population
        tc = config.training
        self.model = GlobalModel.zeros(pc.dim, pc.n_classes)
        self.agg = AggregatorState(tc.aggregator, tc.beta1, tc.beta2, tc.tau, tc.server_lr)
        self.clock = SimClock()
        self.rng = _rng(seed, _SELECT)
        self.policy: SelectionPolicy = policy.selection_policy()
        self.sched_cfg: SchedulerConfig = policy.scheduler
        self.window = WindowState.initial(self.sched_cfg)
        self.records: list[RoundRecord] = []
        self.client_records: dict[str, ClientRecord] = {}
        self.cohort: list[str] = []
        self.period = -1
        self.warmup_durations: list[float] = []
        self.pending_predictions: dict[str, float] = {}
        self.prediction_errors: list[float] = []
        self.selections: list[tuple[int, tuple[str, ...]]] = []
        self.boundaries = []
        self.curve: list[tuple[int, float, float]] = [
            (0, 0.0, evaluate(self.model, self.world.population.test_X, self.world.population.test_y))
        ]

    # selection ---------------------------------------------------------------

    @property
    def kind(self) -> str:
        return self.policy.kind

    def _in_warmup(self, rnd: int) -> bool:
        return self.kind != "random" and rnd <= self.config.run.warmup_rounds

    def _settle_preferred_duration(self) -> None:
        if self.policy.preferred_duration is None:
            if not self.warmup_durations:
                raise AllClientsDropped("warm-up produced no usable client durations")
            T = self.policy_cfg.preferred_duration_factor * float(np.median(self.warmup_durations))
            self.policy = self.policy.with_preferred_duration(T)
        self.sched_cfg = self.sched_cfg.resolved(self.policy.preferred_duration)
        log.debug("preferred duration T=%.3fs", self.policy.preferred_duration)

    def _select(self, rnd: int) -> tuple[list[str], bool]:
        """Cohort for round ``rnd`` and whether it was carried over from a frozen window."""
        if self.kind == "random" or self._in_warmup(rnd):
            self.period += 1
            return select_random(self.client_ids, self.policy.K, self.rng), False
        if self.policy.preferred_duration is None or self.sched_cfg.d_high is None:
            self._settle_preferred_duration()
        if self.kind == "utility-greedy":
            self.period += 1
            fb = base_feedback(self.client_records, self.policy, self.period, self.sched_cfg.stale_decay)
            return select_greedy(fb, self.client_ids, self.policy, self.rng), False
        if self.window.frozen:
            return self.cohort, True
        self.period += 1
        decision, self.window = window_boundary_step(
            self.window,
            self.client_records,
            self.client_ids,
            self.policy,
            self.sched_cfg,
            self.rng,
            self.period,
        )
        self.boundaries.append((rnd, decision.window_before, decision.window_after))
        self.pending_predictions = {
            cid: decision.predictions[cid] for cid in decision.cohort if cid in decision.predictions
        }
        return decision.cohort, False

    # one round -------------------------------------------------------------------

    def run_round(self) -> RoundRecord:
        rnd = len(self.records) + 1
        start = self.clock.now
        cohort, frozen = self._select(rnd)
        self.cohort = cohort
        if not frozen:
            self.selections.append((rnd, tuple(cohort)))

        tc = self.config.training
        profiles = [self.world.profiles[cid] for cid in cohort]
        seeds = [(self.seed, _TRAIN, rnd, self.client_ids.index(cid)) for cid in cohort]
        reports = local_train_many(
            self.model,
            [p.partition for p in profiles],
            tc.epochs,
            tc.batch_size,
            tc.lr,
            seeds,
            [p.per_sample_compute_latency for p in profiles],
        )
        timings: dict[str, ClientTiming] = {}
        for prof, rep in zip(profiles, reports):
            trace = self.world.store.traces[prof.trace_id]
            timings[prof.client_id] = _time_client(
                prof, trace, start, rep.sample_count, tc.epochs, self.config.traces.stall_timeout
            )

        survivors = [r for r in reports if not timings[r.client_id].dropped]
        if not survivors:
            raise AllClientsDropped(f"round {rnd}: every cohort client stalled")
        self.model, self.agg = aggregate(self.agg, self.model, survivors)
        advance = max(timings[r.client_id].total for r in survivors)
        self.clock.advance(advance)

        for rep in reports:
            t = timings[rep.client_id]
            self.client_records[rep.client_id] = ClientRecord(
                _slim(rep), t.total, rnd, self.period
            )
            if rep.client_id in self.pending_predictions:
                pred = self.pending_predictions.pop(rep.client_id)
                self.prediction_errors.append(abs(pred - t.effective_bw))

        report = {cid: (timings[cid].total, timings[cid].effective_bw) for cid in cohort}
        if self._in_warmup(rnd):
            self.warmup_durations.extend(t.total for t in timings.values() if not t.dropped)
            for cid in cohort:
                self.window.record_bandwidth(cid, timings[cid].effective_bw)
        elif self.kind == "dynamicfl":
            observe_round(self.window, report, round_duration=advance)

        acc = None
        if rnd % self.config.run.eval_every == 0 or self._is_last(rnd):
            pop = self.world.population
            acc = evaluate(self.model, pop.test_X, pop.test_y)
            self.curve.append((rnd, self.clock.now, acc))

        record = RoundRecord(
            round=rnd,
            wall_clock_start=start,
            wall_clock_end=self.clock.now,
            cohort=tuple(cohort),
            per_client=timings,
            test_accuracy=acc,
            selection_frozen=frozen,
            window_size=self.window.W if self.kind == "dynamicfl" else None,
        )
        self.records.append(record)
        return record

    def _is_last(self, rnd: int) -> bool:
        run = self.config.run
        if rnd >= run.max_rounds:
            return True
        return run.max_hours is not None and self.clock.now >= run.max_hours * 3600.0

    def _target_reached(self) -> bool:
        return self.curve[-1][2] >= self.config.run.target_accuracy

    def run(self) -> ExperimentResult:
        run = self.config.run
        status = "budget exhausted"
        while len(self.records) < run.max_rounds:
            if run.max_hours is not None and self.clock.now >= run.max_hours * 3600.0:
                break
            rec = self.run_round()
            if rec.test_accuracy is not None and run.stop_at_target and self._target_reached():
                status = "target reached"
                break
        if status != "target reached" and self._target_reached():
            status = "target reached"
        milestones = {m: time_to_accuracy(self.curve, m) for m in run.milestone_list}
        summary = ExperimentSummary(
            policy=self.policy_cfg.name,
            seed=self.seed,
            status=status,
            rounds=len(self.records),
            wall_clock_s=self.clock.now,
            final_accuracy=self.curve[-1][2] if self.records else None,
            milestones=milestones,
            predictor_mae=float(np.mean(self.prediction_errors)) if self.prediction_errors else None,
        )
        return ExperimentResult(self.records, self.curve, summary, self.selections)


def _slim(report):
    # the delta is only needed for aggregation; keep losses and counts
    return replace(report, delta=np.empty(0))


def run_experiment(
    config: ExperimentConfig, policy: PolicyConfig | str, seed: int, world: World | None = None
) -> ExperimentResult:
    if isinstance(policy, str):
        policy = config.policy(policy)
    return Simulation(config, policy, seed, world).run()
