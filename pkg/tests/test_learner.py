import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import DimensionMismatch, EmptyCohort, InvalidConfig
from fedsim.learner import (
    AggregatorState,
    DataPartition,
    GlobalModel,
    LocalTrainReport,
    aggregate,
    evaluate,
    generate_population,
    load_checkpoint,
    local_train,
    local_train_many,
    loss_and_grad,
    nearest_center_model,
    per_sample_losses,
    save_checkpoint,
)

from . import oracles


def small_pop(**kw):
    args = dict(seed=1, n_clients=6, d=5, C=3, dirichlet_alpha=0.5, test_size=300)
    args.update(kw)
    return generate_population(**args)


def report(cid, delta, n=1):
    delta = np.asarray(delta, dtype=float)
    return LocalTrainReport(cid, delta, np.ones(n), n, 0.0)


# -- data --------------------------------------------------------------------


def test_population_is_deterministic():
    a, b = small_pop(), small_pop()
    for pa, pb in zip(a.partitions, b.partitions):
        assert pa.client_id == pb.client_id
        assert np.array_equal(pa.X, pb.X) and np.array_equal(pa.y, pb.y)
    assert np.array_equal(a.test_X, b.test_X)


def test_fixed_sample_count():
    pop = small_pop(samples_per_client_range=(10, 10))
    assert all(p.sample_count == 10 for p in pop.partitions)


def test_huge_alpha_is_near_uniform():
    pop = generate_population(2, 4, 3, 4, 1e6, samples_per_client_range=(4000, 4000), test_size=40)
    for p in pop.partitions:
        hist = np.bincount(p.y, minlength=4) / p.sample_count
        assert np.all(np.abs(hist - 0.25) <= 0.05)


def test_bad_population_args():
    with pytest.raises(InvalidConfig):
        small_pop(dirichlet_alpha=0.0)
    with pytest.raises(InvalidConfig):
        small_pop(samples_per_client_range=(5, 2))


# -- gradient and loss ---------------------------------------------------------


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    d, C, h = 4, 3, 1e-6
    for _ in range(10):
        params = rng.standard_normal(C * d + C)
        X = rng.standard_normal((1, d))
        y = rng.integers(C, size=1)
        _, g = loss_and_grad(params, X, y, d, C)
        num = np.zeros_like(params)
        for i in range(params.size):
            e = np.zeros_like(params)
            e[i] = h
            num[i] = (loss_and_grad(params + e, X, y, d, C)[0] - loss_and_grad(params - e, X, y, d, C)[0]) / (2 * h)
        assert np.linalg.norm(g - num) <= 1e-4 * max(np.linalg.norm(num), 1e-12)


def test_per_sample_losses_match_mean_loss():
    pop = small_pop()
    p = pop.partitions[0]
    params = np.random.default_rng(3).standard_normal(3 * 5 + 3)
    losses = per_sample_losses(params, p.X, p.y, 5, 3)
    assert np.all(losses >= 0)
    assert float(np.mean(losses)) == pytest.approx(loss_and_grad(params, p.X, p.y, 5, 3)[0], rel=1e-12)


# -- local training ------------------------------------------------------------


def test_local_training_reduces_loss():
    pop = small_pop()
    model = GlobalModel.zeros(5, 3)
    p = pop.partitions[0]
    before = per_sample_losses(model.params, p.X, p.y, 5, 3).mean()
    rep = local_train(model, p, epochs=5, batch_size=8, lr=0.05, seed=0)
    assert rep.per_sample_losses.mean() < before


def test_single_sample_single_step():
    part = DataPartition("c0", np.ones((1, 2)), np.array([1]))
    rep = local_train(GlobalModel.zeros(2, 2), part, epochs=1, batch_size=20, lr=0.1, seed=0)
    assert rep.steps == 1
    # zero model: softmax is uniform, gradient on the bias is (0.5, -0.5)
    assert np.allclose(rep.delta, [-0.05, -0.05, 0.05, 0.05, -0.05, 0.05])


def test_zero_lr_gives_zero_delta():
    pop = small_pop()
    rep = local_train(GlobalModel.zeros(5, 3), pop.partitions[1], 3, 4, 0.0, seed=7)
    assert not np.any(rep.delta)


def test_compute_seconds():
    pop = small_pop()
    p = pop.partitions[2]
    rep = local_train(GlobalModel.zeros(5, 3), p, 2, 4, 0.01, seed=1, per_sample_latency=1e-3)
    assert rep.compute_seconds == pytest.approx(p.sample_count * 2 * 1e-3)


def test_local_train_dimension_check():
    part = DataPartition("c0", np.ones((3, 4)), np.zeros(3, dtype=int))
    with pytest.raises(DimensionMismatch):
        local_train(GlobalModel.zeros(5, 3), part, 1, 1, 0.1, seed=0)
    with pytest.raises(InvalidConfig):
        local_train(GlobalModel.zeros(4, 3), part, 0, 1, 0.1, seed=0)


def test_batched_training_matches_single_client_path():
    pop = small_pop()
    model = GlobalModel(np.random.default_rng(2).standard_normal(18) * 0.1, 5, 3)
    seeds = [(9, k) for k in range(len(pop.partitions))]
    many = local_train_many(model, pop.partitions, 2, 7, 0.05, seeds)
    for part, seed, rep in zip(pop.partitions, seeds, many):
        one = local_train(model, part, 2, 7, 0.05, seed)
        assert rep.steps == one.steps
        np.testing.assert_allclose(rep.delta, one.delta, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(rep.per_sample_losses, one.per_sample_losses, rtol=1e-10)


def test_local_train_is_deterministic():
    pop = small_pop()
    model = GlobalModel.zeros(5, 3)
    a = local_train(model, pop.partitions[0], 2, 4, 0.05, seed=(1, 2))
    b = local_train(model, pop.partitions[0], 2, 4, 0.05, seed=(1, 2))
    assert np.array_equal(a.delta, b.delta)


# -- aggregation ---------------------------------------------------------------


def test_fedavg_opposite_deltas_cancel():
    model = GlobalModel(np.arange(6.0), 2, 2)
    u = np.array([1.0, -2.0, 0.5, 3.0, 0.0, 1.0])
    new, _ = aggregate(AggregatorState("fedavg"), model, [report("a", u), report("b", -u)])
    assert np.array_equal(new.params, model.params)
    assert new.version == 1


def test_fedavg_single_report_is_exact():
    model = GlobalModel(np.arange(6.0), 2, 2)
    u = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    new, _ = aggregate(AggregatorState("fedavg"), model, [report("a", u, n=7)])
    assert np.array_equal(new.params, model.params + u)


def test_fedavg_is_sample_weighted():
    model = GlobalModel.zeros(2, 2)
    new, _ = aggregate(
        AggregatorState("fedavg"), model, [report("a", np.ones(6), n=3), report("b", np.zeros(6), n=1)]
    )
    assert np.allclose(new.params, 0.75)


def test_yogi_single_step_matches_oracle():
    rng = np.random.default_rng(4)
    model = GlobalModel(rng.standard_normal(6), 2, 2)
    delta = rng.standard_normal(6)
    st_ = AggregatorState("yogi", beta1=0.9, beta2=0.99, tau=1e-3, server_lr=0.01)
    new, st2 = aggregate(st_, model, [report("a", delta)])
    p, m, v = oracles.yogi_step(
        model.params.tolist(), [0.0] * 6, [1e-6] * 6, delta.tolist(), 0.9, 0.99, 1e-3, 0.01
    )
    assert new.params.tolist() == p
    assert st2.first_moment.tolist() == m
    assert st2.second_moment.tolist() == v


def test_yogi_step_follows_delta_sign():
    model = GlobalModel.zeros(2, 2)
    delta = np.array([0.5, -0.5, 2.0, -3.0, 1e-2, -1e-2])
    new, _ = aggregate(AggregatorState("yogi", beta1=0.0), model, [report("a", delta)])
    assert np.array_equal(np.sign(new.params), np.sign(delta))


def test_aggregate_errors():
    model = GlobalModel.zeros(2, 2)
    with pytest.raises(EmptyCohort):
        aggregate(AggregatorState(), model, [])
    with pytest.raises(DimensionMismatch):
        aggregate(AggregatorState(), model, [report("a", np.ones(3))])


@settings(max_examples=100, deadline=None)
@given(
    delta=st.lists(st.floats(-10, 10), min_size=6, max_size=6),
    counts=st.lists(st.integers(1, 500), min_size=1, max_size=8),
)
def test_fedavg_identical_deltas_move_by_that_delta(delta, counts):
    model = GlobalModel(np.linspace(-1, 1, 6), 2, 2)
    reps = [report(f"c{k}", delta, n=n) for k, n in enumerate(counts)]
    new, _ = aggregate(AggregatorState("fedavg"), model, reps)
    np.testing.assert_allclose(new.params, model.params + np.array(delta), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(order=st.permutations(range(5)))
def test_aggregate_ignores_arrival_order(order):
    rng = np.random.default_rng(8)
    reps = [report(f"c{k}", rng.standard_normal(6), n=k + 1) for k in range(5)]
    model = GlobalModel.zeros(2, 2)
    base, _ = aggregate(AggregatorState(), model, reps)
    shuffled, _ = aggregate(AggregatorState(), model, [reps[i] for i in order])
    assert np.array_equal(base.params, shuffled.params)


# -- evaluation and checkpoints ------------------------------------------------


def test_zero_model_is_chance():
    pop = generate_population(0, 2, 8, 10, 0.5, test_size=2000)
    assert evaluate(GlobalModel.zeros(8, 10), pop.test_X, pop.test_y) == pytest.approx(0.1, abs=0.05)


def test_duplicated_test_set_same_accuracy():
    pop = small_pop()
    model = GlobalModel(np.random.default_rng(1).standard_normal(18), 5, 3)
    X2, y2 = np.vstack([pop.test_X, pop.test_X]), np.concatenate([pop.test_y, pop.test_y])
    assert evaluate(model, X2, y2) == evaluate(model, pop.test_X, pop.test_y)


def test_nearest_center_model_separates():
    pop = generate_population(0, 2, 20, 5, 0.5, center_scale=3.0, test_size=1000)
    assert evaluate(nearest_center_model(pop.centers), pop.test_X, pop.test_y) >= 0.95


def test_checkpoint_round_trip(tmp_path):
    model = GlobalModel(np.random.default_rng(0).standard_normal(18), 5, 3, version=12)
    save_checkpoint(tmp_path / "m.bin", model)
    back = load_checkpoint(tmp_path / "m.bin", 3)
    assert back.version == 12 and back.n_features == 5
    assert np.array_equal(back.params, model.params)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin", 3)
