import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdd.errors import ConfigError, DomainError, NumericError, ShapeError
from sdd.numerics import (ACTIVATIONS, Mlp, RngStream, adam_init, adam_step, clip_grads,
                          finite_diff_check, global_norm, init_mlp, mlp_backward, mlp_forward,
                          mlp_forward_backward, rng_fork, zeros_like)


def sum_sq(out):
    return float(np.sum(out * out)), 2.0 * out


def linear(w, b):
    return Mlp(((np.array(w, dtype=float), np.array(b, dtype=float)),))


# ---- rng -------------------------------------------------------------------


def test_stream_is_a_value():
    r = RngStream(1, (2, 3))
    assert np.array_equal(r.normal(10), r.normal(10))
    assert r.fork(4) == RngStream(1, (2, 3, 4))


def test_fork_same_label_identical():
    a, b = rng_fork(RngStream(1), 0), rng_fork(RngStream(1), 0)
    assert np.array_equal(a.normal(1000), b.normal(1000))


def test_fork_labels_differ():
    a, b = rng_fork(RngStream(1), 0).normal(1000), rng_fork(RngStream(1), 1).normal(1000)
    assert not np.any(a == b)


@pytest.mark.parametrize("seed", [0, 1, 2**63 + 5])
def test_gaussian_mean(seed):
    z = RngStream(seed).normal(100_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.02


def test_prefix_property():
    r = RngStream(9, (1,))
    assert np.array_equal(r.normal(7), r.normal(20)[:7])
    assert np.array_equal(r.uniform(5), r.uniform(50)[:5])


def test_uniform_range_and_integers():
    r = RngStream(3)
    u = r.uniform(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    k = r.integers(1, 7, 60_000)
    assert k.min() == 1 and k.max() == 6
    freq = np.bincount(k, minlength=7)[1:] / k.size
    assert np.all(np.abs(freq - 1 / 6) < 0.01)


def test_empty_integer_range():
    with pytest.raises(ConfigError):
        RngStream(0).integers(3, 3, 2)


def test_scalar_draws():
    assert isinstance(RngStream(0).normal(), float)
    assert isinstance(RngStream(0).uniform(), float)


# ---- mlp forward / backward -------------------------------------------------


def test_zero_net_gives_zero():
    net = init_mlp([3, 4, 2], RngStream(0)).map(np.zeros_like)
    assert np.array_equal(mlp_forward(net, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_affine_identity():
    assert np.array_equal(mlp_forward(linear([[2.0]], [1.0]), np.array([3.0])), [7.0])


def test_linear_chain_rule():
    grads, dx = mlp_backward(linear([[2.0]], [1.0]), np.array([3.0]), np.array([1.0]))
    assert dx.tolist() == [2.0]
    assert grads.layers[0][0].tolist() == [[3.0]]
    assert grads.layers[0][1].tolist() == [1.0]


def test_zero_output_grad(small_net):
    grads, dx = mlp_backward(small_net, np.ones(3), np.zeros(2))
    assert np.all(grads.flat() == 0) and np.all(dx == 0)


def test_forward_is_pure(small_net, rng):
    x = rng.normal(3)
    assert np.array_equal(mlp_forward(small_net, x), mlp_forward(small_net, x))


def test_rows_independent_of_batch(small_net, rng):
    xs = rng.normal((50, 3))
    full = mlp_forward(small_net, xs)
    for i in (0, 17, 49):
        assert np.array_equal(mlp_forward(small_net, xs[i]), full[i])
        assert np.array_equal(mlp_forward(small_net, xs[: i + 1])[i], full[i])


def test_shape_errors(small_net):
    with pytest.raises(ShapeError):
        mlp_forward(small_net, np.ones(4))
    with pytest.raises(ShapeError):
        mlp_backward(small_net, np.ones(3), np.ones(3))
    with pytest.raises(ShapeError):
        Mlp(((np.ones((2, 3)), np.zeros(2)), (np.ones((2, 3)), np.zeros(2))))


def test_forward_backward_agrees(small_net, rng):
    x = rng.normal((4, 3))
    g = rng.fork(1).normal((4, 2))
    out, grads, dx = mlp_forward_backward(small_net, x, lambda o: g)
    grads2, dx2 = mlp_backward(small_net, x, g)
    assert np.array_equal(out, mlp_forward(small_net, x))
    assert np.array_equal(grads.flat(), grads2.flat()) and np.array_equal(dx, dx2)


@pytest.mark.parametrize("activation", sorted(ACTIVATIONS))
@pytest.mark.parametrize("batch", [None, 3])
def test_finite_differences(activation, batch):
    net = init_mlp([4, 6, 5, 3], RngStream(2), activation)
    net = net.map(lambda a: a + 0.1 * RngStream(len(a.shape)).normal(a.shape))
    x = RngStream(3).normal(4 if batch is None else (batch, 4))
    assert finite_diff_check(net, x, sum_sq) < 1e-5


def test_quadratic_on_linear_is_exact():
    net = linear([[1.5, -0.5], [0.25, 2.0]], [0.1, -0.3])
    assert finite_diff_check(net, np.array([0.7, -1.2]), sum_sq) < 1e-8


@pytest.mark.parametrize("step", [0.0, -1e-5])
def test_bad_step(small_net, step):
    with pytest.raises(DomainError):
        finite_diff_check(small_net, np.ones(3), sum_sq, step)


def test_checkpoint_roundtrip(small_net):
    doc = small_net.to_dict()
    assert doc["format"] == "sdd-mlp-v1" and doc["activation"] == "silu"
    assert Mlp.from_dict(doc) == small_net


def test_n_params(small_net):
    assert small_net.n_params == (3 * 5 + 5) + (5 * 4 + 4) + (4 * 2 + 2)
    assert small_net.flat().size == small_net.n_params


def test_glorot_bounds():
    net = init_mlp([10, 30], RngStream(0))
    w, b = net.layers[0]
    assert np.all(np.abs(w) <= math.sqrt(6 / 40)) and np.all(b == 0)
    assert init_mlp([3, 4, 2], RngStream(0), zero_last=True).layers[-1][0].max() == 0


# ---- adam -------------------------------------------------------------------


def test_zero_grad_leaves_params(small_net):
    p, state = adam_step(small_net, zeros_like(small_net), adam_init(small_net), lr=0.1)
    assert p == small_net and state.step == 1


def test_lr_zero_is_identity(small_net):
    g = small_net.map(lambda a: np.ones_like(a))
    p, state = adam_step(small_net, g, adam_init(small_net), lr=0.0)
    assert p == small_net and state.step == 1


def test_negative_lr(small_net):
    with pytest.raises(ConfigError):
        adam_step(small_net, zeros_like(small_net), adam_init(small_net), lr=-1.0)


def test_clip_rescales_to_norm(small_net):
    g = small_net.map(lambda a: np.ones_like(a))
    g = g.map(lambda a: a * (10.0 / global_norm(g)))
    clipped, pre = clip_grads(g, 1.0)
    assert abs(pre - 10.0) < 1e-12
    assert abs(global_norm(clipped) - 1.0) < 1e-12


def test_clip_leaves_small_grads(small_net):
    g = small_net.map(lambda a: np.full_like(a, 1e-3))
    assert clip_grads(g, 1.0)[0] == g


def test_constant_gradient_moves_against_sign(small_net):
    g = small_net.map(lambda a: np.where(np.arange(a.size).reshape(a.shape) % 2, 1.0, -0.5))
    p, state = small_net, adam_init(small_net)
    for _ in range(50):
        p, state = adam_step(p, g, state, lr=1e-2)
    moved = p.flat() - small_net.flat()
    assert np.all(np.sign(moved) == -np.sign(g.flat()))
    # with a constant gradient the bias-corrected step is lr * sign(g) up to eps
    assert np.allclose(np.abs(moved), 50 * 1e-2, rtol=1e-5)


def test_non_finite_gradient_named(small_net):
    g = zeros_like(small_net)
    bad = [list(l) for l in g.layers]
    bad[1][1] = np.array([0.0, np.nan, 0.0, 0.0])
    g = Mlp(tuple(tuple(l) for l in bad))
    with pytest.raises(NumericError, match=r"layers\[1\]\.b"):
        adam_step(small_net, g, adam_init(small_net))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**32))
def test_backward_linear_in_output_grad(sizes, seed):
    net = init_mlp(sizes, RngStream(seed))
    x = RngStream(seed).fork(1).normal(sizes[0])
    g = RngStream(seed).fork(2).normal(sizes[-1])
    p1, x1 = mlp_backward(net, x, g)
    p2, x2 = mlp_backward(net, x, 2.0 * g)
    assert np.allclose(p2.flat(), 2.0 * p1.flat(), rtol=1e-12, atol=1e-300)
    assert np.allclose(x2, 2.0 * x1, rtol=1e-12, atol=1e-300)
