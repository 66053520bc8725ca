import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import mlp_loss_check
from emtcycle.errors import NumericError, ShapeError
from emtcycle.neuralnet import (LINEAR, SIGMOID, AdamState, MlpLayout, MlpParams, TrainSchedule,
                                adam_step, bce, bce_grad, l1_loss, leaky_relu, lr_at,
                                mlp_backward, mlp_forward, mlp_init, mse_loss)


def one_to_one(act, w=1.0, b=0.0):
    layout = MlpLayout(1, (), 1, act)
    return MlpParams(layout, [np.array([[w]])], [np.array([b])])


# --- init and forward ----------------------------------------------------------------

def test_init_deterministic_and_zero_bias():
    layout = MlpLayout.uniform(7, 16, 3, leaky_relu(0.2), 1, SIGMOID)
    a, b = mlp_init(layout, 3), mlp_init(layout, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert all(not bias.any() for bias in a.biases)
    c = mlp_init(layout, 4)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_glorot_bound():
    p = mlp_init(MlpLayout(7, (), 16, LINEAR), 0)
    assert np.abs(p.weights[0]).max() <= 0.5107539184552492   # sqrt(6/23)


@pytest.mark.parametrize("act, x, expected", [
    (LINEAR, 3.0, 3.0),
    (leaky_relu(0.2), -2.0, -0.4),
])
def test_forward_scalars(act, x, expected):
    out, _ = mlp_forward(one_to_one(act), [x])
    assert out[0] == pytest.approx(expected)


@given(st.floats(-1e3, 1e3))
def test_sigmoid_zero_weight_is_half(x):
    out, _ = mlp_forward(one_to_one(SIGMOID, w=0.0), [x])
    assert out[0] == 0.5


def test_forward_width_mismatch():
    with pytest.raises(ShapeError):
        mlp_forward(one_to_one(LINEAR), [1.0, 2.0])


def test_forward_pure():
    p = mlp_init(MlpLayout.uniform(7, 16, 4, leaky_relu(0.01), 5, LINEAR), 1)
    x = np.random.default_rng(0).normal(size=(4, 7))
    assert np.array_equal(mlp_forward(p, x)[0], mlp_forward(p, x)[0])


def test_invalid_layout():
    with pytest.raises(ValueError):
        MlpLayout(0, (), 1)
    with pytest.raises(ValueError):
        leaky_relu(0.0)


# --- backward --------------------------------------------------------------------------

def test_linear_weight_grad_is_input():
    p = one_to_one(LINEAR, w=2.0)
    out, cache = mlp_forward(p, [3.0])
    grads, dx = mlp_backward(p, cache, [1.0])
    assert grads[0][0, 0] == 3.0
    assert dx[0] == 2.0


def test_leaky_negative_scales_upstream():
    p = one_to_one(leaky_relu(0.2))
    _, cache = mlp_forward(p, [-1.5])
    _, dx = mlp_backward(p, cache, [5.0])
    assert dx[0] == pytest.approx(1.0)


def test_backward_shape_mismatch():
    p = one_to_one(LINEAR)
    _, cache = mlp_forward(p, [1.0])
    with pytest.raises(ShapeError):
        mlp_backward(p, cache, [1.0, 2.0])


def test_random_7_16_5_finite_differences():
    # layouts are random; this fixes seeds and checks several draws of each loss
    rng = np.random.default_rng(7)
    for loss in ("bce", "l1", "mse"):
        for _ in range(5):
            assert float(mlp_loss_check(rng, loss)) < 1e-4


# --- Adam and schedule -------------------------------------------------------------

def test_adam_first_step_value():
    p = [np.array([1.0])]
    new, st_ = adam_step(p, [np.array([1.0])], AdamState.zeros_like(p), 0.0005)
    # bias-corrected m_hat = 1, v_hat = 1 at t = 1
    assert 1.0 - new[0][0] == pytest.approx(0.0005 / (1 + 1e-8), abs=1e-12)
    assert st_.t == 1


def test_adam_zero_lr_keeps_params_updates_moments():
    p = [np.array([[1.0, 2.0]])]
    new, st_ = adam_step(p, [np.array([[0.3, -0.4]])], AdamState.zeros_like(p), 0.0)
    assert np.array_equal(new[0], p[0])
    assert st_.m[0].any() and st_.v[0].any()


def test_adam_zero_grads_keep_params():
    p = [np.array([1.0, -1.0])]
    st_ = AdamState.zeros_like(p)
    for _ in range(3):
        p2, st_ = adam_step(p, [np.zeros(2)], st_, 0.01)
        assert np.array_equal(p2[0], p[0])


def test_adam_does_not_mutate_inputs():
    p = [np.array([1.0])]
    st0 = AdamState.zeros_like(p)
    adam_step(p, [np.array([1.0])], st0, 0.1)
    assert p[0][0] == 1.0 and st0.t == 0 and st0.m[0][0] == 0.0


def test_adam_non_finite_names_layer():
    p = [np.zeros((2, 2)), np.zeros(2), np.zeros((1, 2)), np.zeros(1)]
    g = [np.zeros((2, 2)), np.zeros(2), np.array([[np.nan, 0.0]]), np.zeros(1)]
    with pytest.raises(NumericError, match="layer 1"):
        adam_step(p, g, AdamState.zeros_like(p), 0.1)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_adam_zero_lr_invariant(gs):
    p = [np.array([0.5])]
    st_ = AdamState.zeros_like(p)
    for g in gs:
        p2, st_ = adam_step(p, [np.array([g])], st_, 0.0)
        assert p2[0][0] == 0.5


def test_lr_schedule_values():
    s = TrainSchedule()
    assert lr_at(s, 50) == 0.0005
    assert lr_at(s, 200) == 0.0
    assert lr_at(s, 150) == pytest.approx(0.00025, abs=1e-12)
    with pytest.raises(ValueError):
        lr_at(s, 201)


def test_lr_non_increasing():
    s = TrainSchedule()
    lrs = [lr_at(s, e) for e in range(s.total_epochs + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 0.0 and min(lrs) >= 0


# --- losses ------------------------------------------------------------------------

def test_bce_values():
    assert bce(0.5, 1.0) == pytest.approx(math.log(2))
    assert bce(1 - 1e-7, 1.0) == pytest.approx(1e-7, rel=1e-3)
    assert bce(0.8, 0.9) == pytest.approx(0.36177298742619884, rel=1e-12)


def test_bce_clamped_outside_range():
    assert np.isfinite(bce(0.0, 1.0))
    assert bce_grad(np.array([0.0]), 1.0)[0] == 0.0


@pytest.mark.parametrize("a, b, l1, mse", [
    ([1.0, 3.0], [0.0, 1.0], 1.5, 2.5),
    ([2.0], [0.0], 2.0, 4.0),
    ([1.0, -2.0], [1.0, -2.0], 0.0, 0.0),
])
def test_l1_mse(a, b, l1, mse):
    assert l1_loss(a, b) == l1
    assert mse_loss(a, b) == mse


def test_loss_length_mismatch():
    with pytest.raises(ShapeError):
        l1_loss([1.0], [1.0, 2.0])


def test_params_json_roundtrip():
    p = mlp_init(MlpLayout.uniform(7, 16, 3, leaky_relu(0.2), 1, SIGMOID), 5)
    back = MlpParams.from_json(json.loads(json.dumps(p.to_json())))
    assert back.layout == p.layout
    assert all(np.array_equal(x, y) for x, y in zip(back.arrays(), p.arrays()))
