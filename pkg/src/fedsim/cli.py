"""Command-line runner: policy x seed matrices, window sweeps, config validation."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, PolicyConfig, load_config, with_overrides
from .engine import ExperimentResult, World, build_world, run_experiment, time_to_accuracy
from .errors import ConfigError, ValidationError

log = logging.getLogger("fedsim")

CURVE_HEADER = ("round", "wall_clock_s", "accuracy")
REPORT_HEADER = (
    "policy",
    "seed",
    "status",
    "rounds",
    "wall_clock_s",
    "final_accuracy",
    "milestone",
    "time_to_milestone_s",
    "speedup_vs_baseline",
)
SWEEP_HEADER = ("window", "seed", "predictor_mae", "time_to_target_s")
NA = "n/a"


# -- atomic output -------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def records_ndjson(result: ExperimentResult) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in result.records)


def curve_csv(curve) -> str:
    return _csv_text(CURVE_HEADER, curve)


def read_curve(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CURVE_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(int(r), float(t), float(a)) for r, t, a in rows[1:]]


# -- comparison report -----------------------------------------------------------


@dataclass
class CellResult:
    policy: str
    seed: int
    status: str
    rounds: int = 0
    wall_clock_s: float | None = None
    final_accuracy: float | None = None
    milestones: dict[float, float | None] = field(default_factory=dict)
    predictor_mae: float | None = None

    @property
    def ok(self) -> bool:
        return not self.status.startswith("failed")


@dataclass
class ComparisonReport:
    baseline: str
    milestones: tuple[float, ...]
    cells: list[CellResult]

    def cell(self, policy: str, seed: int) -> CellResult | None:
        for c in self.cells:
            if c.policy == policy and c.seed == seed:
                return c
        return None

    @property
    def all_ok(self) -> bool:
        return all(c.ok for c in self.cells)

    def pair_speedup(self, cell: CellResult, milestone: float) -> float | None:
        """Baseline time over policy time on the same seed; None unless both got there."""
        base = self.cell(self.baseline, cell.seed)
        if base is None or not (base.ok and cell.ok):
            return None
        tb, tp = base.milestones.get(milestone), cell.milestones.get(milestone)
        if tb is None or tp is None or tp <= 0:
            return None
        return tb / tp

    def median_speedup(self, policy: str, milestone: float) -> float | None:
        vals = [
            s
            for c in self.cells
            if c.policy == policy and (s := self.pair_speedup(c, milestone)) is not None
        ]
        return float(np.median(vals)) if vals else None

    def median_time(self, policy: str, milestone: float) -> float:
        """Median time-to-milestone; unreached runs count as infinitely slow."""
        vals = [
            c.milestones.get(milestone) if c.ok else None
            for c in self.cells
            if c.policy == policy
        ]
        return float(np.median([np.inf if v is None else v for v in vals]))

    def rows(self):
        policies = list(dict.fromkeys(c.policy for c in self.cells))
        for c in self.cells:
            for m in self.milestones:
                yield (
                    c.policy,
                    c.seed,
                    c.status,
                    c.rounds,
                    c.wall_clock_s,
                    c.final_accuracy,
                    m,
                    c.milestones.get(m),
                    self.pair_speedup(c, m),
                )
        for p in policies:
            for m in self.milestones:
                yield (p, "median", "", "", "", "", m, "", self.median_speedup(p, m))

    def to_csv(self) -> str:
        return _csv_text(REPORT_HEADER, self.rows())

    def table(self) -> str:
        lines = [f"baseline: {self.baseline}"]
        for c in self.cells:
            tta = "  ".join(f"{m:g}:{_short(c.milestones.get(m))}" for m in self.milestones)
            acc = "-" if c.final_accuracy is None else f"{c.final_accuracy:.4f}"
            lines.append(f"{c.policy:<28} seed={c.seed:<4} {c.status:<18} acc={acc}  {tta}")
        for p in dict.fromkeys(c.policy for c in self.cells):
            sp = "  ".join(f"{m:g}:{_short(self.median_speedup(p, m), 'x')}" for m in self.milestones)
            lines.append(f"median speedup {p:<20} {sp}")
        return "\n".join(lines)


def _short(x, unit="s") -> str:
    return NA if x is None else f"{x:.3g}{unit}"


# -- running ---------------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("FEDSIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer FEDSIM_THREADS=%r", raw)
        return 1


class _WorldCache:
    """Worlds depend only on (seed, trace mode); share them across policies."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._worlds: dict[tuple[int, str], World] = {}

    def get(self, seed: int, policy: PolicyConfig) -> World:
        mode = policy.traces or self.config.traces.mode
        key = (seed, mode)
        if key not in self._worlds:
            self._worlds[key] = build_world(self.config, seed, trace_mode=mode)
        return self._worlds[key]


def _run_cell(config, policy, seed, worlds, outdir: Path | None) -> CellResult:
    try:
        result = run_experiment(config, policy, seed, worlds.get(seed, policy))
    except Exception as exc:  # one bad cell must not sink the matrix
        log.error("%s seed %d failed: %s", policy.name, seed, exc)
        return CellResult(policy.name, seed, f"failed: {type(exc).__name__}: {exc}")
    if outdir is not None:
        stem = f"{policy.name}_{seed}"
        atomic_write(outdir / f"{stem}.ndjson", records_ndjson(result))
        atomic_write(outdir / f"{stem}.csv", curve_csv(result.curve))
    s = result.summary
    return CellResult(
        policy.name,
        seed,
        s.status,
        s.rounds,
        s.wall_clock_s,
        s.final_accuracy,
        dict(s.milestones),
        s.predictor_mae,
    )


def _run_cells(config, cells, outdir, threads) -> list[CellResult]:
    worlds = _WorldCache(config)
    # build worlds up front so threads never race on the cache
    for policy, seed in cells:
        worlds.get(seed, policy)
    if threads <= 1 or len(cells) <= 1:
        return [_run_cell(config, p, s, worlds, outdir) for p, s in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_cell, config, p, s, worlds, outdir) for p, s in cells]
        return [f.result() for f in futures]


def run_matrix(
    config: ExperimentConfig, outdir: str | Path | None = None, threads: int | None = None
) -> ComparisonReport:
    """Run every (policy, seed) cell and write records, curves and the report."""
    out = Path(outdir if outdir is not None else config.run.outdir)
    cells = [(p, s) for p in config.policies for s in config.run.seeds]
    results = _run_cells(config, cells, out, threads or _threads())
    report = ComparisonReport(config.baseline, config.run.milestone_list, results)
    atomic_write(out / "report.csv", report.to_csv())
    return report


def _dynamic_policy(config: ExperimentConfig) -> PolicyConfig:
    for p in config.policies:
        if p.kind == "dynamicfl":
            return p
    raise ValidationError("policies", "window sweep needs a dynamicfl policy")


def fixed_window(policy: PolicyConfig, W: int) -> PolicyConfig:
    sched = replace(policy.scheduler, w_init=W, w_min=W, w_max=W, adaptive_window=False)
    return replace(policy, name=f"{policy.name}-w{W}", scheduler=sched)


def sweep_window(
    config: ExperimentConfig,
    sizes: Sequence[int],
    outdir: str | Path | None = None,
    threads: int | None = None,
) -> list[tuple[int, int, float | None, float | None]]:
    """Fix the window at each size (no adaptation) and tabulate prediction error and time-to-target."""
    if not sizes:
        raise ValidationError("sizes", "at least one window size is required")
    if any(int(w) < 1 for w in sizes):
        raise ValidationError("sizes", "window sizes must be >= 1")
    base = _dynamic_policy(config)
    cells = [(fixed_window(base, int(W)), s) for W in sizes for s in config.run.seeds]
    out = Path(outdir if outdir is not None else config.run.outdir)
    results = _run_cells(config, cells, out, threads or _threads())
    target = config.run.target_accuracy
    rows = [
        (p.scheduler.w_init, r.seed, r.predictor_mae, r.milestones.get(target))
        for (p, _), r in zip(cells, results)
    ]
    atomic_write(out / "window_sweep.csv", _csv_text(SWEEP_HEADER, rows))
    if not all(r.ok for r in results):
        raise RuntimeError("some sweep cells failed; see window_sweep.csv and the log")
    return rows


# -- argparse --------------------------------------------------------------------


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window size list {text!r}") from None
    return sizes


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="TOML config file or preset name")
        p.add_argument("--outdir", help="output directory (overrides run.outdir)")
        p.add_argument("--seed", type=int, nargs="+", help="seeds (override run.seeds)")
        p.add_argument("--policy", nargs="+", help="restrict to these policy names")

    common(sub.add_parser("run", help="run every policy x seed cell"))
    sw = sub.add_parser("sweep-window", help="fixed-window sweep of the dynamicfl policy")
    common(sw)
    sw.add_argument("--sizes", type=_parse_sizes, required=True, help="comma-separated, e.g. 2,5,10")
    v = sub.add_parser("validate", help="load and validate a config, print the resolved values")
    v.add_argument("config")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "validate":
            print(json.dumps(_plain(config), indent=2, sort_keys=True))
            return 0
        config = with_overrides(config, args.seed, args.outdir, args.policy)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        report = run_matrix(config)
        print(report.table())
        return 0 if report.all_ok else 1
    try:
        rows = sweep_window(config, args.sizes)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(_csv_text(SWEEP_HEADER, rows), end="")
    return 0


def _plain(obj):
    if is_dataclass(obj):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


if __name__ == "__main__":
    sys.exit(main())
