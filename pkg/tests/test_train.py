import math

import numpy as np
import pytest

from romflow import flow as F
from romflow import train as T
from romflow.flow import build_model
from romflow.train import Objective, TrainConfig
from romflow.weighting import WeightedDataset, uniform_dataset

from conftest import random_model


def tiny_model(seed=0):
    return random_model(n=2, L=1, H1=4, H2=4, seed=seed)


def fd_check(model, y, w, objective, h=1e-6):
    _, grads, _ = T.objective_and_gradient(model, y, w, objective)
    flat0 = model.get_flat()
    analytic = np.concatenate([g.ravel() for g in grads])
    num = np.empty_like(flat0)
    for i in range(flat0.size):
        f = []
        for s in (1, -1):
            x = flat0.copy()
            x[i] += s * h
            model.set_flat(x)
            f.append(T.objective_and_gradient(model, y, w, objective)[0])
        num[i] = (f[0] - f[1]) / (2 * h)
    model.set_flat(flat0)
    return analytic, num


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# --- objective pieces ------------------------------------------------------

def test_cross_entropy_of_identity_model(rng):
    m = build_model(2, 2, rng=rng)
    y = rng.normal(size=(40, 2))
    ce = T.weighted_cross_entropy(m, y, np.full(40, 1 / 40))
    assert ce == pytest.approx(-np.mean(F.std_normal_logpdf(y)), rel=1e-14)


def test_two_point_weighted_cross_entropy(rng):
    m = build_model(2, 1, rng=rng)
    y = np.array([[0.0, 0.0], [1.0, 2.0]])
    # -log phi(0,0) = log 2pi; -log phi(1,2) = log 2pi + 5/2
    expect = 0.75 * math.log(2 * math.pi) + 0.25 * (math.log(2 * math.pi) + 2.5)
    assert T.weighted_cross_entropy(m, y, [3.0, 1.0]) == pytest.approx(expect, rel=1e-14)


def test_zero_weights_rejected(rng):
    m = build_model(2, 1, rng=rng)
    with pytest.raises(ValueError):
        T.weighted_cross_entropy(m, np.zeros((2, 2)), [0.0, 0.0])
    with pytest.raises(ValueError):
        T.weighted_cross_entropy(m, np.zeros((2, 2)), [1.0, -1.0])


def test_penalty_vanishes_for_reference_model_and_beta_zero(rng):
    y = rng.normal(size=(8, 2))
    assert T.penalty(build_model(2, 3, rng=rng), y, np.ones(8), Objective(10.0)) == pytest.approx(0, abs=1e-14)
    assert T.penalty(tiny_model(), y, np.ones(8), Objective(0.0)) == 0.0


def test_penalty_brute_force(rng):
    m = tiny_model(1)
    y = rng.normal(size=(5, 2))
    w = rng.uniform(0.1, 1, 5)
    score = np.array([F.grad_y_log_density(m, yi) for yi in y])
    ref = 3.0 * math.sqrt(np.sum(w / w.sum() * np.sum((-y - score) ** 2, axis=1)))
    assert T.penalty(m, y, w, Objective(3.0)) == pytest.approx(ref, abs=1e-12)


def test_objective_decomposition(rng):
    m = tiny_model(2)
    y, w = rng.normal(size=(6, 2)), rng.uniform(size=6)
    v0 = T.objective_and_gradient(m, y, w, Objective(0.0))[0]
    vb, _, parts = T.objective_and_gradient(m, y, w, Objective(5.0))
    assert vb - v0 == pytest.approx(T.penalty(m, y, w, Objective(5.0)), abs=1e-12)
    assert parts["cross_entropy"] == pytest.approx(v0, abs=1e-14)


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        T.objective_and_gradient(tiny_model(), rng.normal(size=(3, 3)), np.ones(3), Objective())


def test_negative_beta_rejected():
    with pytest.raises(ValueError):
        Objective(-1.0)


# --- gradients -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(2))
def test_gradient_matches_finite_differences_without_penalty(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    y, w = rng.normal(size=(7, 2)), rng.uniform(size=7)
    a, n = fd_check(m, y, w, Objective(0.0))
    assert rel_err(a, n) <= 1e-5


@pytest.mark.parametrize("seed", range(2))
def test_gradient_matches_finite_differences_with_penalty(seed):
    rng = np.random.default_rng(10 + seed)
    m = tiny_model(seed)
    y, w = rng.normal(size=(7, 2)), rng.uniform(size=7)
    a, n = fd_check(m, y, w, Objective(10.0))
    assert rel_err(a, n) <= 1e-4


def test_bias_gradient_for_gaussian_case(rng):
    # identity model: d CE / d b = sum_i w_i y_i (z = y + b at the first layer)
    m = build_model(2, 1, 4, 4, rng=rng)
    y, w = rng.normal(size=(20, 2)), rng.uniform(size=20)
    _, grads, _ = T.objective_and_gradient(m, y, w, Objective(0.0))
    gb = grads[m.parameter_names().index("layer0.b")]
    np.testing.assert_allclose(gb, (w / w.sum()) @ y, atol=1e-13)


def test_weight_scaling_invariance(rng):
    m = tiny_model(3)
    y, w = rng.normal(size=(6, 2)), rng.uniform(size=6)
    v1, g1, _ = T.objective_and_gradient(m, y, w, Objective(2.0))
    v2, g2, _ = T.objective_and_gradient(m, y, 37.5 * w, Objective(2.0))
    assert v1 == pytest.approx(v2, rel=1e-13)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_value_reports_sample(rng):
    m = tiny_model()
    m.layers[0].params["Wout"][:] = 1e300
    with pytest.raises(FloatingPointError):
        T.objective_and_gradient(m, rng.normal(size=(3, 2)), np.ones(3), Objective())


# --- batching --------------------------------------------------------------

def test_stratified_batches_counting_oracle(rng):
    # bins of [-1, 0) with K=2: 10 in the lower half, 20 in the upper, 30 with g >= 0
    g = np.concatenate([np.full(10, -0.9), np.full(20, -0.2), np.full(30, 0.5)])
    batches = T.stratified_batches(g, 1.0, 2, 5, rng)
    assert len(batches) == 5
    for b in batches:
        counts = [np.sum(g[b] == v) for v in (-0.9, -0.2, 0.5)]
        assert counts == [2, 4, 6]
    assert sorted(np.concatenate(batches)) == list(range(60))


@pytest.mark.parametrize("n_batches", [1, 3, 7])
def test_batches_partition_dataset(n_batches, rng):
    g = rng.uniform(-1, 1, 101)
    batches = T.stratified_batches(g, 1.0, 4, n_batches, rng)
    assert len(batches) == n_batches
    allidx = np.concatenate(batches)
    assert np.array_equal(np.sort(allidx), np.arange(101))
    if n_batches == 1:
        assert batches[0].size == 101


def test_all_nonnegative_is_plain_split(rng):
    g = np.ones(10)
    batches = T.stratified_batches(g, 0.0, 4, 3, rng)
    assert [b.size for b in batches] == [4, 3, 3]


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [x.copy() for x in p]
    opt = T.Adam(p, 0.1)
    for _ in range(3):
        opt.step([np.zeros(2), np.zeros((2, 2))])
    for a, b in zip(p, before):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([0.0, 0.0])]
    T.Adam(p, 0.01).step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)


# --- training loop ---------------------------------------------------------

def _toy_dataset(rng, n=200):
    y = rng.normal(size=(n, 2)) * [1.5, 0.5] + [0.5, 0.0]
    return uniform_dataset(y)


def test_zero_learning_rate_leaves_model_unchanged(rng):
    m = random_model(n=2, L=2, seed=0)
    flat = m.get_flat()
    _, h = T.train(m, _toy_dataset(rng), Objective(1.0), TrainConfig(learning_rate=0, epochs=3, n_batches=4))
    np.testing.assert_array_equal(m.get_flat(), flat)
    assert len(h) == 3 and np.ptp(h.cross_entropy) == 0 and np.ptp(h.penalty) == 0


def test_training_is_deterministic(rng):
    ds = _toy_dataset(rng)
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, n_batches=4, seed=7)
    runs = []
    for _ in range(2):
        m = random_model(n=2, L=2, seed=1)
        _, h = T.train(m, ds, Objective(0.5), cfg)
        runs.append((m.get_flat(), h.cross_entropy, h.penalty))
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_cross_entropy(rng):
    ds = _toy_dataset(rng, 400)
    m = build_model(2, 2, 16, 16, rng=rng)
    _, h = T.train(m, ds, Objective(0.0), TrainConfig(learning_rate=1e-2, epochs=20, n_batches=4))
    assert h.cross_entropy[-1] < h.cross_entropy[0] - 0.1


def test_history_csv_round_trip(tmp_path, rng):
    m = random_model(n=2, L=1, seed=0)
    _, h = T.train(m, _toy_dataset(rng), Objective(), TrainConfig(epochs=2, n_batches=2))
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,cross_entropy,penalty,wall_time_seconds"
    h2 = T.TrainHistory.from_csv(tmp_path / "h.csv")
    np.testing.assert_array_equal(h.cross_entropy, h2.cross_entropy)


def test_history_epochs_must_increase():
    h = T.TrainHistory()
    h.append(T.EpochRecord(1, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        h.append(T.EpochRecord(1, 0.0, 0.0, 0.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_last_good_parameters(rng):
    m = random_model(n=2, L=1, seed=0)
    ds = _toy_dataset(rng)
    ds.y[0, 0] = 1e200
    flat = m.get_flat()
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(m, ds, Objective(), TrainConfig(epochs=2, n_batches=1))
    np.testing.assert_array_equal(m.get_flat(), flat)
    assert err.value.history is not None


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        TrainConfig(n_batches=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
