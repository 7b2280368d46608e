import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privaware.models import (
    Architecture,
    Layer,
    Model,
    TrainConfig,
    _summed_grad,
    clip_per_example,
    dpsgd_train,
    evaluate,
    forward,
    init_model,
    mlp,
    param_count,
    per_example_grads,
    per_example_losses,
    predict,
    rwt_freeze,
    sgd_train,
    zeros_model,
)
from privaware.numerics import RngStream


def _fd_grad(model, X, y, loss, h=1e-6):
    num = np.zeros_like(model.theta)
    for p in range(model.theta.size):
        a, b = model.copy(), model.copy()
        a.theta[p] += h
        b.theta[p] -= h
        num[p] = (per_example_losses(a, X, y, loss).sum() - per_example_losses(b, X, y, loss).sum()) / (2 * h)
    return num


def test_param_counts():
    assert param_count(mlp(784, [], 10)) == (7850, 7850)
    fcn = mlp(784, [1024, 512, 64], 10)
    assert param_count(fcn)[0] == 1_362_122
    assert param_count(rwt_freeze(fcn, 2)) == (1_362_122, 33_482)
    assert rwt_freeze(fcn, 4) == fcn
    with pytest.raises(ValueError):
        rwt_freeze(fcn, 0)
    with pytest.raises(ValueError):
        rwt_freeze(fcn, 5)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(0, (Layer(2, "softmax"),))
    with pytest.raises(ValueError):
        Layer(3, "swish")
    with pytest.raises(ValueError):
        Layer(0, "relu")
    arch = mlp(5, [4, 3], 2, "tanh", dropout=0.1)
    assert Architecture.from_dict(arch.to_dict()) == arch
    assert arch.shapes() == [(5, 4), (4, 3), (3, 2)]


def test_init_is_deterministic_and_glorot():
    arch = mlp(400, [300], 10)
    a, b = init_model(arch, RngStream(1)), init_model(arch, RngStream(1))
    assert np.array_equal(a.theta, b.theta)
    W, bias = a.weights(0)
    limit = math.sqrt(6 / 700)
    assert np.all(np.abs(W) <= limit) and np.all(bias == 0)
    sd = limit / math.sqrt(3)
    assert abs(W.mean()) < 3 * sd / math.sqrt(W.size)


def test_forward_examples():
    model = zeros_model(mlp(3, [], 4))
    assert np.allclose(forward(model, [1.0, 2.0, 3.0]), 0.25)
    reg = zeros_model(Architecture(2, (Layer(1, "linear"),), task="regression"))
    reg.theta[:2] = [1.0, 0.5]
    assert forward(reg, [1.0, 1.0]) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        forward(reg, [1.0, 1.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_probabilities_sum_to_one(seed):
    rng = RngStream(seed)
    model = init_model(mlp(4, [5], 3, "sigmoid"), rng)
    model.theta *= 5
    p = predict(model, rng.normal(size=(6, 4)))
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)


def test_gradients_three_layer_net():
    rng = RngStream(11)
    model = init_model(mlp(6, [10, 8], 3, "tanh"), rng)
    assert 150 <= model.theta.size <= 250
    X, y = rng.normal(size=(9, 6)), rng.integers(0, 3, size=9)
    G = per_example_grads(model, X, y)
    num = _fd_grad(model, X, y, "categorical_xent")
    assert np.max(np.abs(G.sum(axis=0) - num) / np.maximum(1e-3, np.abs(num))) < 1e-5
    # a batch of one is the same as the per-example row
    assert np.allclose(per_example_grads(model, X[:1], y[:1])[0], G[0])


def test_summed_clipped_grad_matches_explicit_clipping():
    rng = RngStream(12)
    model = init_model(mlp(5, [7], 2, "relu"), rng)
    X, y = rng.normal(size=(16, 5)), rng.integers(0, 2, size=16)
    G = per_example_grads(model, X, y)
    for clip in (1e-3, 0.1, 1.0, 1e9):
        g, norms = _summed_grad(model, X, y, "categorical_xent", [True, True], clip, None)
        assert np.allclose(norms, np.linalg.norm(G, axis=1))
        assert np.allclose(g, clip_per_example(G, clip).sum(axis=0), atol=1e-12)


@given(st.floats(1e-4, 10.0), st.integers(0, 1000))
def test_clipping_invariant(clip, seed):
    G = RngStream(seed).normal(0, 3, size=(8, 12))
    out = clip_per_example(G, clip)
    assert np.all(np.linalg.norm(out, axis=1) <= clip * (1 + 1e-12))
    small = np.linalg.norm(G, axis=1) <= clip
    assert np.array_equal(out[small], G[small])


def test_zero_learning_rate_keeps_theta(rng):
    model = init_model(mlp(3, [4], 2), rng)
    X, y = rng.normal(size=(20, 3)), rng.integers(0, 2, size=20)
    out = sgd_train(model, X, y, TrainConfig(0.0, 5, 3), rng.child("t"))
    assert np.array_equal(out.theta, model.theta)


def test_separable_toy_reaches_full_accuracy():
    rng = RngStream(13)
    X = rng.normal(size=(100, 2))
    y = (X[:, 0] + 2 * X[:, 1] > 0).astype(int)
    X = X + np.where(y[:, None] == 1, 0.3, -0.3)  # margin
    model = init_model(Architecture(2, (Layer(1, "sigmoid"),)), rng)
    out = sgd_train(model, X, y, TrainConfig(0.5, 10, 200), rng.child("t"))
    assert evaluate(out, X, y) == 1.0


def test_full_batch_loss_nonincreasing():
    rng = RngStream(14)
    X = rng.normal(size=(50, 3))
    y = (X.sum(axis=1) > 0).astype(int)
    model = init_model(Architecture(3, (Layer(1, "sigmoid"),)), rng)
    losses = []
    sgd_train(model, X, y, TrainConfig(0.1, 50, 30), rng.child("t"),
              on_epoch=lambda e, m: losses.append(per_example_losses(m, X, y).mean()))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_frozen_layers_bit_equal_after_dp_training(rng):
    arch = rwt_freeze(mlp(4, [6, 5], 3), 1)
    model = init_model(arch, rng)
    X, y = rng.normal(size=(40, 4)), rng.integers(0, 3, size=40)
    out, eps = dpsgd_train(model, X, y, TrainConfig(0.2, 10, 3, clip_l2=1.0, noise_multiplier=1.0), rng.child("t"))
    frozen = ~model.trainable_mask()
    assert np.array_equal(out.theta[frozen], model.theta[frozen])
    assert not np.array_equal(out.theta[~frozen], model.theta[~frozen])
    assert math.isfinite(eps) and eps > 0
    assert out.meta["epsilon"] == eps


def test_dpsgd_zero_noise_reports_infinite_epsilon(rng):
    model = init_model(mlp(3, [], 2), rng)
    X, y = rng.normal(size=(20, 3)), rng.integers(0, 2, size=20)
    _, eps = dpsgd_train(model, X, y, TrainConfig(0.1, 5, 1, clip_l2=1.0, noise_multiplier=0.0), rng)
    assert eps == math.inf


@pytest.mark.parametrize("kw", [{"clip_l2": 0.0, "noise_multiplier": 1.0}, {"clip_l2": 1.0, "noise_multiplier": -1.0},
                                {"clip_l2": None, "noise_multiplier": 1.0}])
def test_dpsgd_rejects_bad_config(rng, kw):
    model = init_model(mlp(3, [], 2), rng)
    with pytest.raises(ValueError):
        dpsgd_train(model, np.zeros((4, 3)), np.zeros(4, int), TrainConfig(0.1, 2, 1, **kw), rng)


def test_dropout_only_during_training(rng):
    model = init_model(mlp(4, [16], 2, dropout=0.5), rng)
    X = rng.normal(size=(10, 4))
    assert np.array_equal(predict(model, X), predict(model, X))


def test_evaluate_examples(rng):
    reg = zeros_model(Architecture(2, (Layer(1, "linear"),), task="regression"))
    y = np.array([1.0, 2.0, 6.0])
    reg.theta[-1] = y.mean()
    assert evaluate(reg, np.zeros((3, 2)), y) == pytest.approx(np.mean(np.abs(y - y.mean())))
    with pytest.raises(ValueError):
        evaluate(reg, np.zeros((0, 2)), np.zeros(0))
    # random softmax net on balanced 10-class data
    X = rng.normal(size=(20000, 5))
    y = np.arange(20000) % 10
    acc = evaluate(init_model(mlp(5, [8], 10), rng.child("m")), X, y)
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / 20000) + 0.02


def test_checkpoint_roundtrip(tmp_path, rng):
    model = init_model(mlp(3, [4], 2, "tanh"), rng)
    model.meta.update(epsilon=1.5, delta=1e-5, seed=3)
    path = tmp_path / "m.json"
    model.save(path)
    back = Model.load(path)
    assert back.arch == model.arch
    assert np.array_equal(back.theta, model.theta)
    assert back.meta["epsilon"] == 1.5


def test_mismatched_input_rejected(rng):
    model = init_model(mlp(3, [], 2), rng)
    with pytest.raises(ValueError):
        sgd_train(model, np.zeros((4, 5)), np.zeros(4, int), TrainConfig(), rng)
