import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egogrpo.numerics import (
    Adam, DimensionError, Mlp, NonFiniteGradientError, Rng, adam_step, global_norm, mlp_backward, mlp_forward,
)
from oracles import central_difference, max_relative_error


def test_zero_weight_net_outputs_zero():
    net = Mlp([3, 5, 2])
    assert np.array_equal(mlp_forward(net, np.ones((4, 3))), np.zeros((4, 2)))


def test_identity_layer_passes_input_through():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    v = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(mlp_forward(net, v[None])[0], v)


def test_scalar_affine_layer():
    net = Mlp([1, 1], [np.array([[2.0]])], [np.array([1.0])])
    assert mlp_forward(net, np.array([[3.0]]))[0, 0] == 7.0


def test_scalar_weight_gradient():
    net = Mlp([1, 1], [np.array([[0.7]])], [np.array([0.0])])
    (gw, gb), gx = mlp_backward(net, np.array([[3.0]]), np.array([[1.0]]))
    assert gw[0, 0] == 3.0 and gb[0] == 1.0 and gx[0, 0] == pytest.approx(0.7)


def test_zero_output_grad_gives_zero_gradients():
    net = Mlp.initialized([4, 8, 2], Rng(0))
    grads, gx = mlp_backward(net, Rng(1).normal((5, 4)), np.zeros((5, 2)))
    assert all(not g.any() for g in grads) and not gx.any()


def test_gradients_match_finite_differences():
    net = Mlp.initialized([4, 8, 2], Rng(2))
    x = Rng(3).normal((6, 4))
    seed = Rng(4).normal((6, 2))
    grads, _ = mlp_backward(net, x, seed)
    numeric = central_difference(lambda: float(np.sum(mlp_forward(net, x) * seed)), net.params)
    assert max_relative_error(grads, numeric) < 1e-4


def test_shape_error_names_layer():
    net = Mlp([3, 4, 2])
    with pytest.raises(DimensionError, match="layer 0"):
        mlp_forward(net, np.ones((2, 5)))
    with pytest.raises(DimensionError, match="layer 1"):
        Mlp([3, 4, 2], [np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([1.0, 1.0])])
    before = p.copy()
    m_before = opt.m[0].copy()
    opt.step([np.zeros(2)])
    # the first moment still pushes params; with zero grad it decays by beta1
    assert np.allclose(opt.m[0], 0.9 * m_before)
    p2 = np.array([5.0])
    fresh = Adam([p2], lr=0.1)
    fresh.step([np.zeros(1)])
    assert p2[0] == 5.0 and before.shape == (2,)


def test_adam_first_step_moves_by_lr_times_sign():
    p = np.array([1.0, 1.0, 1.0])
    g = np.array([0.5, -3.0, 1e-3])
    Adam([p], lr=0.01).step([g])
    assert np.allclose(p, 1.0 - 0.01 * np.sign(g), atol=1e-7)


def test_adam_is_deterministic_and_rejects_non_finite():
    a, b = np.ones(3), np.ones(3)
    g = Rng(5).normal(3)
    adam_step(Adam([a], lr=0.1), [a], [g])
    adam_step(Adam([b], lr=0.1), [b], [g])
    assert np.array_equal(a, b)
    opt = Adam([a])
    snapshot = a.copy()
    with pytest.raises(NonFiniteGradientError, match="param 0"):
        opt.step([np.array([1.0, np.nan, 0.0])])
    assert np.array_equal(a, snapshot) and opt.step_count == 0


def test_rng_clones_repeat_and_children_are_independent():
    r = Rng(11)
    assert np.array_equal(r.clone().normal(50), r.clone().normal(50))
    x = Rng(11).normal(100_000)
    assert abs(x.mean()) < 0.02 and abs(x.var() - 1) < 0.05
    a = Rng(11).child("a").normal(10_000)
    b = Rng(11).child("b").normal(10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_child_streams_ignore_parent_consumption():
    parent = Rng(9)
    first = parent.child("x").normal(5)
    parent.normal(1000)
    assert np.array_equal(first, parent.child("x").normal(5))


def test_global_norm():
    assert global_norm([np.array([3.0]), np.array([[4.0]])]) == 5.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2 ** 32))
def test_gradient_oracle_random_architectures(dims, seed):
    net = Mlp.initialized(dims, Rng(seed))
    x = Rng(seed).child("x").normal((3, dims[0]))
    w = Rng(seed).child("w").normal((3, dims[-1]))
    grads, gx = mlp_backward(net, x, w)
    numeric = central_difference(lambda: float(np.sum(mlp_forward(net, x) * w)), net.params + [x])
    assert max_relative_error(grads + [gx], numeric) < 1e-4
