"""Client feedback and the baseline selectors (random, utility-greedy)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Collection, Mapping

import numpy as np

from .errors import CohortTooLarge, InvalidInput

POLICY_KINDS = ("random", "utility-greedy", "dynamicfl")


@dataclass(frozen=True)
class Feedback:
    client_id: str
    utility: float
    duration: float
    last_round_participated: int


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "utility-greedy"
    K: int = 20
    epsilon: float = 0.1
    preferred_duration: float | None = None
    penalty_exponent: float = 2.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.penalty_exponent < 0:
            raise ValueError("penalty_exponent must be >= 0")

    def with_preferred_duration(self, T: float) -> "SelectionPolicy":
        return replace(self, preferred_duration=T)


def compute_utility(report, duration: float, F: float, policy: SelectionPolicy) -> float:
    """Statistical utility times the (bandwidth-adjusted) system utility.

    ``report`` needs ``per_sample_losses`` and ``sample_count``. The system
    factor ``(T*F/t)^alpha`` only applies to clients slower than the
    preferred duration ``T``.
    """
    if not duration > 0:
        raise InvalidInput(f"duration must be positive, got {duration}")
    if not 0.0 < F <= 1.0:
        raise InvalidInput(f"bandwidth factor must lie in (0, 1], got {F}")
    T = policy.preferred_duration
    if T is None or not T > 0:
        raise InvalidInput("policy has no positive preferred_duration")
    losses = np.asarray(report.per_sample_losses, dtype=np.float64)
    n = report.sample_count
    if n < 1 or losses.size != n or not np.all(np.isfinite(losses)):
        raise InvalidInput("report must carry one finite loss per sample")
    statistical = n * F * math.sqrt(float(np.dot(losses, losses)) / n)
    if T < duration and policy.penalty_exponent > 0:
        return statistical * (T * F / duration) ** policy.penalty_exponent
    return statistical


def select_random(population: Collection[str], K: int, rng: np.random.Generator) -> list[str]:
    """Uniform sample of ``K`` clients without replacement, returned sorted."""
    pool = sorted(population)
    if K > len(pool):
        raise CohortTooLarge(f"K={K} exceeds population of {len(pool)}")
    picks = rng.choice(len(pool), size=K, replace=False)
    return sorted(pool[i] for i in picks)


def select_greedy(
    feedback: Mapping[str, Feedback],
    population: Collection[str],
    policy: SelectionPolicy,
    rng: np.random.Generator,
) -> list[str]:
    """Exploit the top ``ceil((1-eps)K)`` observed clients, explore the rest.

    Exploitation ranks by utility, ties going to the smaller client id.
    Exploration draws uniformly from never-selected clients first; once those
    run out it draws from the ``2 * need`` least-recently-selected leftovers.
    """
    pool = sorted(population)
    K = policy.K
    if K > len(pool):
        raise CohortTooLarge(f"K={K} exceeds population of {len(pool)}")
    n_exploit = math.ceil((1.0 - policy.epsilon) * K - 1e-12)
    observed = [cid for cid in pool if cid in feedback]
    ranked = sorted(observed, key=lambda cid: (-feedback[cid].utility, cid))
    chosen = ranked[:n_exploit]
    need = K - len(chosen)
    if need:
        taken = set(chosen)
        fresh = [cid for cid in pool if cid not in feedback]
        if len(fresh) >= need:
            chosen += _draw(fresh, need, rng)
        else:
            chosen += fresh
            need -= len(fresh)
            stale = sorted(
                (cid for cid in observed if cid not in taken),
                key=lambda cid: (feedback[cid].last_round_participated, cid),
            )
            chosen += _draw(stale[: 2 * need], need, rng)
    return sorted(chosen)


def _draw(candidates: list[str], k: int, rng: np.random.Generator) -> list[str]:
    if k >= len(candidates):
        return list(candidates)
    return [candidates[i] for i in rng.choice(len(candidates), size=k, replace=False)]
