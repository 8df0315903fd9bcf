"""Desk-scale federated task: synthetic non-IID data, local SGD, server aggregation.

The model is a linear softmax classifier with parameters flattened as the
``C x d`` weight matrix (row-major) followed by the ``C`` biases.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyCohort, InvalidConfig, NonFiniteLoss

AGGREGATORS = ("fedavg", "yogi")
CHECKPOINT_MAGIC = b"FSIM"


@dataclass
class DataPartition:
    client_id: str
    X: np.ndarray
    y: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(self.y.size)


@dataclass
class Population:
    partitions: list[DataPartition]
    test_X: np.ndarray
    test_y: np.ndarray
    centers: np.ndarray

    @property
    def client_ids(self) -> list[str]:
        return [p.client_id for p in self.partitions]


def client_id_for(index: int) -> str:
    return f"c{index:04d}"


def generate_population(
    seed: int,
    n_clients: int,
    d: int,
    C: int,
    dirichlet_alpha: float,
    samples_per_client_range: tuple[int, int] = (40, 150),
    center_scale: float = 1.0,
    test_size: int = 2000,
) -> Population:
    """Gaussian-cluster classification data split non-IID across clients.

    Class centers are drawn from ``N(0, center_scale^2 I)``; each sample is its
    class center plus unit-variance noise. Every client draws a class mixture
    from ``Dirichlet(alpha)`` and a sample count uniformly from the inclusive
    range. The held-out test set is class-balanced.
    """
    lo, hi = samples_per_client_range
    if n_clients < 1 or d < 1 or C < 1 or test_size < 1:
        raise InvalidConfig("n_clients, d, C and test_size must be positive")
    if not dirichlet_alpha > 0:
        raise InvalidConfig("dirichlet_alpha must be positive")
    if lo < 1 or hi < lo:
        raise InvalidConfig(f"bad samples_per_client_range {samples_per_client_range}")

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((C, d)) * center_scale
    partitions = []
    for k in range(n_clients):
        mix = rng.dirichlet(np.full(C, dirichlet_alpha))
        if not np.all(np.isfinite(mix)) or mix.sum() <= 0:
            # tiny alpha can underflow every component
            mix = np.eye(C)[rng.integers(C)]
        n = int(rng.integers(lo, hi + 1))
        counts = rng.multinomial(n, mix / mix.sum())
        y = np.repeat(np.arange(C), counts)
        X = centers[y] + rng.standard_normal((n, d))
        partitions.append(DataPartition(client_id_for(k), X, y))

    per_class = [test_size // C + (1 if c < test_size % C else 0) for c in range(C)]
    test_y = np.repeat(np.arange(C), per_class)
    test_X = centers[test_y] + rng.standard_normal((test_y.size, d))
    return Population(partitions, test_X, test_y, centers)


# -- model -------------------------------------------------------------------


@dataclass
class GlobalModel:
    params: np.ndarray
    n_features: int
    n_classes: int
    version: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.dim,):
            raise DimensionMismatch(f"expected {self.dim} parameters, got {self.params.shape}")

    @classmethod
    def zeros(cls, n_features: int, n_classes: int) -> "GlobalModel":
        return cls(np.zeros(n_classes * n_features + n_classes), n_features, n_classes)

    @property
    def dim(self) -> int:
        return self.n_classes * self.n_features + self.n_classes

    @property
    def weights(self) -> np.ndarray:
        return self.params[: self.n_classes * self.n_features].reshape(self.n_classes, self.n_features)

    @property
    def bias(self) -> np.ndarray:
        return self.params[self.n_classes * self.n_features :]


def _split(params, d, C):
    return params[: C * d].reshape(C, d), params[C * d :]


def per_sample_losses(params: np.ndarray, X: np.ndarray, y: np.ndarray, d: int, C: int) -> np.ndarray:
    W, b = _split(params, d, C)
    z = X @ W.T + b
    m = z.max(axis=1)
    # (m - z_y) + log(sum) keeps every term non-negative
    lse = np.log(np.exp(z - m[:, None]).sum(axis=1))
    return (m - z[np.arange(y.size), y]) + lse


def loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, d: int, C: int):
    """Mean cross-entropy and its gradient w.r.t. the flat parameter vector."""
    W, b = _split(params, d, C)
    z = X @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = y.size
    loss = float(np.mean(np.log(e.sum(axis=1)) - z[np.arange(n), y]))
    g = p
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, np.concatenate(((g.T @ X).ravel(), g.sum(axis=0)))


@dataclass
class LocalTrainReport:
    client_id: str
    delta: np.ndarray
    per_sample_losses: np.ndarray
    sample_count: int
    compute_seconds: float
    steps: int = 0

    @property
    def rms_loss(self) -> float:
        return math.sqrt(float(np.mean(self.per_sample_losses**2))) if self.sample_count else 0.0


def local_train(
    model: GlobalModel,
    partition: DataPartition,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int | Sequence[int],
    per_sample_latency: float = 0.0,
) -> LocalTrainReport:
    """Mini-batch SGD on cross-entropy; the last batch of an epoch may be short."""
    if epochs < 1 or batch_size < 1:
        raise InvalidConfig("epochs and batch_size must be >= 1")
    d, C = model.n_features, model.n_classes
    X, y = partition.X, partition.y
    n = y.size
    if X.shape != (n, d):
        raise DimensionMismatch(f"partition features {X.shape} do not match model dim {d}")
    rng = np.random.default_rng(seed)
    W = model.weights.copy()
    b = model.bias.copy()
    rows = np.arange(batch_size)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            Xb = X[idx]
            z = Xb @ W.T + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[rows[: idx.size], y[idx]] -= 1.0
            p /= idx.size
            W -= lr * (p.T @ Xb)
            b -= lr * p.sum(axis=0)
            steps += 1
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NonFiniteLoss(f"client {partition.client_id}: parameters diverged (lr={lr})")
    trained = np.concatenate((W.ravel(), b))
    losses = per_sample_losses(trained, X, y, d, C)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss(f"client {partition.client_id}: non-finite loss (lr={lr})")
    return LocalTrainReport(
        client_id=partition.client_id,
        delta=trained - model.params,
        per_sample_losses=losses,
        sample_count=n,
        compute_seconds=n * epochs * per_sample_latency,
        steps=steps,
    )


def local_train_many(
    model: GlobalModel,
    partitions: Sequence[DataPartition],
    epochs: int,
    batch_size: int,
    lr: float,
    seeds: Sequence,
    per_sample_latencies: Sequence[float] | None = None,
) -> list[LocalTrainReport]:
    """Run :func:`local_train` for a whole cohort in lock-step.

    Each client keeps its own shuffle stream and batch sequence; shorter
    schedules are padded with masked no-op steps. Results agree with the
    per-client path to floating-point reduction order.
    """
    if epochs < 1 or batch_size < 1:
        raise InvalidConfig("epochs and batch_size must be >= 1")
    K = len(partitions)
    if K == 0:
        return []
    d, C = model.n_features, model.n_classes
    latencies = per_sample_latencies or [0.0] * K
    sizes = [p.sample_count for p in partitions]
    n_max = max(sizes)
    X = np.zeros((K, n_max, d))
    Y = np.zeros((K, n_max), dtype=np.int64)
    for k, p in enumerate(partitions):
        if p.X.shape != (sizes[k], d):
            raise DimensionMismatch(f"partition features {p.X.shape} do not match model dim {d}")
        X[k, : sizes[k]] = p.X
        Y[k, : sizes[k]] = p.y

    schedules = []
    for k, n in enumerate(sizes):
        rng = np.random.default_rng(seeds[k])
        batches = []
        for _ in range(epochs):
            order = rng.permutation(n)
            batches.extend(order[s : s + batch_size] for s in range(0, n, batch_size))
        schedules.append(batches)
    S = max(len(b) for b in schedules)
    idx = np.zeros((K, S, batch_size), dtype=np.int64)
    weight = np.zeros((K, S, batch_size))
    for k, batches in enumerate(schedules):
        for s, b in enumerate(batches):
            idx[k, s, : b.size] = b
            weight[k, s, : b.size] = 1.0 / b.size

    W = np.broadcast_to(model.weights, (K, C, d)).copy()
    bias = np.broadcast_to(model.bias, (K, C)).copy()
    kk = np.arange(K)[:, None]
    rows = np.arange(batch_size)[None, :]
    for s in range(S):
        ib = idx[:, s]
        Xb = X[kk, ib]
        z = Xb @ W.transpose(0, 2, 1) + bias[:, None, :]
        z -= z.max(axis=2, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=2, keepdims=True)
        p[kk, rows, Y[kk, ib]] -= 1.0
        p *= weight[:, s, :, None]
        W -= lr * (p.transpose(0, 2, 1) @ Xb)
        bias -= lr * p.sum(axis=1)

    reports = []
    for k, part in enumerate(partitions):
        if not (np.all(np.isfinite(W[k])) and np.all(np.isfinite(bias[k]))):
            raise NonFiniteLoss(f"client {part.client_id}: parameters diverged (lr={lr})")
        trained = np.concatenate((W[k].ravel(), bias[k]))
        losses = per_sample_losses(trained, part.X, part.y, d, C)
        if not np.all(np.isfinite(losses)):
            raise NonFiniteLoss(f"client {part.client_id}: non-finite loss (lr={lr})")
        reports.append(
            LocalTrainReport(
                client_id=part.client_id,
                delta=trained - model.params,
                per_sample_losses=losses,
                sample_count=sizes[k],
                compute_seconds=sizes[k] * epochs * latencies[k],
                steps=len(schedules[k]),
            )
        )
    return reports


# -- aggregation -------------------------------------------------------------


@dataclass
class AggregatorState:
    kind: str = "yogi"
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 0.01
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise InvalidConfig(f"aggregator must be one of {AGGREGATORS}, got {self.kind!r}")


def aggregate(
    state: AggregatorState, model: GlobalModel, reports: Sequence[LocalTrainReport]
) -> tuple[GlobalModel, AggregatorState]:
    """Sample-weighted mean delta applied by FedAvg or the Yogi server optimizer.

    Reports are reduced in sorted client order so the result does not depend
    on arrival order.
    """
    if not reports:
        raise EmptyCohort("aggregate needs at least one report")
    for r in reports:
        if r.delta.shape != model.params.shape:
            raise DimensionMismatch(f"client {r.client_id}: delta {r.delta.shape} vs model {model.params.shape}")
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = sum(r.sample_count for r in ordered)
    if total <= 0:
        raise EmptyCohort("reports carry no samples")
    mean_delta = np.zeros_like(model.params)
    for r in ordered:
        mean_delta += (r.sample_count / total) * r.delta

    if state.kind == "fedavg":
        params = model.params + mean_delta
        new_state = state
    else:
        m = state.first_moment if state.first_moment is not None else np.zeros_like(mean_delta)
        v = state.second_moment if state.second_moment is not None else np.full_like(mean_delta, state.tau**2)
        if m.shape != mean_delta.shape or v.shape != mean_delta.shape:
            raise DimensionMismatch("optimizer moments do not match the model")
        sq = mean_delta * mean_delta
        m = state.beta1 * m + (1 - state.beta1) * mean_delta
        v = v - (1 - state.beta2) * sq * np.sign(v - sq)
        params = model.params + state.server_lr * m / (np.sqrt(v) + state.tau)
        new_state = replace(state, first_moment=m, second_moment=v)
    return GlobalModel(params, model.n_features, model.n_classes, model.version + 1), new_state


def evaluate(model: GlobalModel, X: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if y.size == 0:
        raise ValueError("empty test set")
    z = X @ model.weights.T + model.bias
    return float(np.mean(np.argmax(z, axis=1) == y))


def nearest_center_model(centers: np.ndarray) -> GlobalModel:
    """Linear model equivalent to nearest-center classification."""
    C, d = centers.shape
    bias = -0.5 * np.sum(centers**2, axis=1)
    return GlobalModel(np.concatenate((centers.ravel(), bias)), d, C)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, model: GlobalModel) -> None:
    """Write ``FSIM`` magic, uint32 version, uint64 dim, then little-endian float64 params."""
    header = CHECKPOINT_MAGIC + struct.pack("<IQ", model.version, model.dim)
    Path(path).write_bytes(header + model.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, n_classes: int) -> GlobalModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, dim = struct.unpack("<IQ", raw[4:16])
    params = np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)
    if params.size != dim or (dim - n_classes) % n_classes:
        raise DimensionMismatch(f"{path}: payload of {params.size} values, header says {dim}")
    return GlobalModel(params, (dim - n_classes) // n_classes, n_classes, version)
