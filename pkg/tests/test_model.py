import json

import numpy as np
import pytest

from aashnet import model
from aashnet.checks import central_diff, random_problem, rel_error
from aashnet.errors import ShapeError, ValidationError
from aashnet.model import Dataset, HyperParams, Objective, Standardizer, Topology, Weights


def example_net():
    topo = Topology(2, 1, "tanh", include_bias=False)
    w = Weights(topo, np.array([1.0, 1.0]), np.array([[1.0, 0.0]]), np.array([2.0]))
    return topo, w


def test_predict_hand_example():
    _, w = example_net()
    h = HyperParams(alpha=0.5)
    expect = 0.5 * 0.8 + 0.5 * 2 * np.tanh(0.3)
    assert model.predict(w, h, np.array([0.3, 0.5])) == pytest.approx(0.69131, abs=5e-6)
    assert model.predict(w, h, np.array([0.3, 0.5])) == pytest.approx(expect, rel=1e-15)


def test_predict_zero_weights_and_alpha_one(rng):
    topo = Topology(3, 4)
    x = rng.normal(size=(5, 3))
    assert np.all(model.predict(Weights.zeros(topo), HyperParams(), x) == 0)
    w = model.init_weights(topo, 0)
    beta = w.skip
    out = model.predict(w, HyperParams(alpha=1.0), x)
    np.testing.assert_array_equal(out, np.hstack([x, np.ones((5, 1))]) @ beta)


def test_decomposition(rng):
    topo = Topology(4, 3)
    w = model.init_weights(topo, rng)
    x = rng.normal(size=(6, 4))
    h = HyperParams(alpha=0.3)
    lin, dense = model.linear_term(w, x), model.dense_term(w, x)
    np.testing.assert_allclose(model.predict(w, h, x), 0.3 * lin + 0.7 * dense, rtol=0, atol=1e-12)
    # alpha = 0 ignores the skip block entirely
    w2 = Weights(topo, w.skip + 5.0, w.input_hidden, w.hidden_out)
    np.testing.assert_array_equal(model.predict(w, HyperParams(alpha=0.0), x),
                                  model.predict(w2, HyperParams(alpha=0.0), x))


def test_shape_mismatch():
    _, w = example_net()
    with pytest.raises(ShapeError):
        model.predict(w, HyperParams(), np.ones(3))


def test_mse_cases(rng):
    topo = Topology(2, 0)
    data = Dataset.of(rng.normal(size=(4, 2)), np.ones(4))
    assert model.mse(Weights.zeros(topo), HyperParams(), data) == 1.0
    w = model.init_weights(topo, rng)
    h = HyperParams(alpha=0.7)
    naive = sum((data.y[i] - model.predict(w, h, data.X[i])) ** 2 for i in range(4)) / 4
    assert model.mse(w, h, data) == pytest.approx(naive, rel=1e-14)
    with pytest.raises(ValidationError):
        model.mse(w, h, Dataset.of(np.empty((0, 2)), np.empty(0)))


def test_penalty_cases():
    topo = Topology(1, 0, include_bias=False)
    w = Weights(topo, np.array([2.0]), np.zeros((0, 1)), np.zeros(0))
    assert model.penalty(w, HyperParams(0.0, 1.0)) == 2.0
    topo = Topology(1, 1, include_bias=False)
    w = Weights(topo, np.zeros(1), np.array([[3.0]]), np.array([-4.0]))
    assert model.penalty(w, HyperParams(0.5, 0.0, eps=1e-12)) == pytest.approx(3.5, abs=1e-6)


def test_penalty_skips_bias_and_is_monotone(rng):
    topo = Topology(3, 2)
    w = model.init_weights(topo, rng)
    h = HyperParams(0.1, 0.2)
    w2 = w.copy()
    w2.skip[-1] += 10.0
    w2.input_hidden[:, -1] += 10.0
    assert model.penalty(w2, h) == model.penalty(w, h)
    assert model.penalty(w, h) >= 0
    assert model.penalty(w, h.replace(lam1=0.2)) >= model.penalty(w, h)
    assert model.penalty(w, h.replace(lam2=0.3)) >= model.penalty(w, h)


def test_regularized_loss_zero_weights(rng):
    topo = Topology(3, 2)
    data = Dataset.of(rng.normal(size=(5, 3)), rng.normal(size=5))
    h = HyperParams(0.1, 0.2, eps=1e-4)
    n_dense = 2 * 3 + 2  # bias column of the input-hidden block is unpenalized
    expect = np.mean(data.y ** 2) + 0.1 * n_dense * np.sqrt(1e-4)
    assert model.regularized_loss(Weights.zeros(topo), h, data) == pytest.approx(expect, rel=1e-14)
    assert model.regularized_loss(Weights.zeros(topo), h.replace(lam1=0, lam2=0), data) == np.mean(data.y ** 2)


def test_tape_equals_direct_formula(rng):
    for _ in range(10):
        topo, w, h, data = random_problem(rng)
        obj = Objective(topo, data, h.eps)
        assert obj.value(w.flat(), h) == pytest.approx(model.regularized_loss(w, h, data), rel=1e-12, abs=1e-14)


def test_grad_matches_fd(rng):
    for _ in range(50):
        topo, w, h, data = random_problem(rng)
        g = model.grad_w(w, h, data).flat()
        fd = central_diff(lambda f: model.regularized_loss(Weights.from_flat(topo, f), h, data), w.flat())
        assert rel_error(g, fd) < 1e-6


def test_grad_skip_block_with_zero_residuals(rng):
    topo = Topology(2, 0, include_bias=False)
    w = Weights(topo, np.array([0.5, -1.5]), np.zeros((0, 2)), np.zeros(0))
    h = HyperParams(0.0, 0.3, alpha=1.0)
    X = rng.normal(size=(6, 2))
    data = Dataset.of(X, X @ w.skip)
    np.testing.assert_allclose(model.grad_w(w, h, data).skip, 0.3 * w.skip, rtol=1e-12)


def test_grad_dense_zero_weight_penalty_term():
    topo = Topology(1, 1, include_bias=False)
    w = Weights(topo, np.zeros(1), np.zeros((1, 1)), np.zeros(1))
    data = Dataset.of(np.ones((1, 1)), np.zeros(1))
    g = model.grad_w(w, HyperParams(1.0, 0.0), data)
    assert g.input_hidden[0, 0] == 0.0 and g.hidden_out[0] == 0.0


def test_mixed_partials(rng):
    topo = Topology(3, 2)
    w = model.init_weights(topo, rng)
    h = HyperParams(0.05, 0.1, 0.4)
    data = Dataset.of(rng.normal(size=(8, 3)), rng.normal(size=8))
    zero = model.mixed_partial_vec(w, h, data, Weights.zeros(topo))
    assert np.all(zero == 0)
    v = Weights(topo, w.skip * topo.skip_mask(), np.zeros_like(w.input_hidden), np.zeros(2))
    assert model.mixed_partial_vec(w, h, data, v)[1] == pytest.approx(np.sum((w.skip * topo.skip_mask()) ** 2))
    v = Weights.from_flat(topo, rng.normal(size=topo.n_weights))
    d = 1e-6
    fd = (model.grad_w(w, h.replace(alpha=0.4 + d), data).flat()
          - model.grad_w(w, h.replace(alpha=0.4 - d), data).flat()) / (2 * d) @ v.flat()
    assert model.mixed_partial_vec(w, h, data, v)[2] == pytest.approx(fd, rel=1e-4)


def test_j0_alpha1_equals_ridge_objective(rng):
    topo = Topology(3, 0)
    w = model.init_weights(topo, rng)
    X, y = rng.normal(size=(10, 3)), rng.normal(size=10)
    h = HyperParams(0.7, 0.2, 1.0)
    beta, b0 = w.skip[:3], w.skip[3]
    ridge = np.mean((y - X @ beta - b0) ** 2) + 0.1 * beta @ beta
    assert model.regularized_loss(w, h, Dataset.of(X, y)) == pytest.approx(ridge, rel=1e-14)


def test_hyperparams_validation_and_transform():
    with pytest.raises(ValidationError):
        HyperParams(lam1=-1)
    with pytest.raises(ValidationError):
        HyperParams(alpha=1.5)
    with pytest.raises(ValidationError):
        HyperParams(eps=0)
    h = HyperParams(0.02, 0.3, 0.25)
    back = HyperParams.from_theta(h.theta(), h.eps)
    assert back.lam1 == pytest.approx(0.02) and back.alpha == pytest.approx(0.25)


def test_weights_json_roundtrip(rng):
    topo = Topology(4, 3, "logistic")
    w = model.init_weights(topo, rng)
    text = w.to_json(note="x")
    back = Weights.from_json(text)
    assert back.topology == topo
    assert np.array_equal(back.flat(), w.flat())
    assert json.loads(text)["note"] == "x"


def test_weights_shape_checks():
    with pytest.raises(ShapeError):
        Weights(Topology(2, 1), np.zeros(2), np.zeros((1, 3)), np.zeros(1))


def test_standardizer_guard(rng):
    X = np.column_stack([rng.normal(size=20), np.full(20, 3.0)])
    s = Standardizer.fit(X)
    Z = s.transform(X)
    assert np.all(Z[:, 1] == 0)
    np.testing.assert_allclose(Z[:, 0].std(), 1.0)
    np.testing.assert_allclose(s.inverse(Z), X)


def test_init_is_deterministic():
    topo = Topology(5, 3)
    assert np.array_equal(model.init_weights(topo, 7).flat(), model.init_weights(topo, 7).flat())
