"""Autodiff core: forward values against independent oracles, gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from informer_codec import tensor as T
from informer_codec.tensor import Tensor, backward, grad_check


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- elementwise -----------------------------------------------------------------------

def test_add_and_leaky_relu_and_clamp_values():
    assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert_allclose(T.leaky_relu(Tensor([-1.0, 2.0]), 0.01).data, [-0.01, 2.0])
    assert_allclose(T.clamp_min(Tensor([0.001]), 0.01).data, [0.01])


def test_elementwise_dispatch_matches_direct_ops():
    a, b = Tensor([1.0, 4.0]), Tensor([2.0, 8.0])
    assert_array_equal(T.elementwise("sub", a, b).data, [-1.0, -4.0])
    assert_array_equal(T.elementwise("div", a, b).data, [0.5, 0.5])
    assert_array_equal(T.elementwise("sqrt", b).data, np.sqrt([2.0, 8.0]))
    assert_array_equal(T.elementwise("negate", a).data, [-1.0, -4.0])
    assert_allclose(T.elementwise("clamp_min", a, bound=2.0).data, [2.0, 4.0])
    with pytest.raises(ValueError):
        T.elementwise("cube", a)


@pytest.mark.parametrize("op, bad", [("log", [0.0]), ("log", [-1.0]), ("sqrt", [-1.0])])
def test_domain_errors(op, bad):
    with pytest.raises(ValueError):
        getattr(T, op)(Tensor(bad))


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_broadcast_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


_shapes = st.lists(st.integers(1, 3), min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(_shapes, st.data())
def test_broadcast_matches_explicit_tiling(shape, data):
    # derive a broadcast-compatible partner by collapsing some axes to 1 and dropping leading ones
    keep = data.draw(st.lists(st.booleans(), min_size=len(shape), max_size=len(shape)))
    drop = data.draw(st.integers(0, len(shape) - 1))
    other = [n if k else 1 for n, k in zip(shape, keep)][drop:]
    rng = np.random.default_rng(len(shape) * 7 + drop)
    a, b = rng.standard_normal(shape), rng.standard_normal(other)
    tiled = np.tile(b.reshape((1,) * (len(shape) - len(other)) + b.shape),
                    [s // t for s, t in zip(shape, (1,) * (len(shape) - len(other)) + b.shape)])
    assert_array_equal(T.add(Tensor(a), Tensor(b)).data, a + tiled)
    assert_array_equal(T.mul(Tensor(a), Tensor(b)).data, a * tiled)


# -- matmul ------------------------------------------------------------------------------

def _triple_loop(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_examples(rng):
    assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]])).data,
                       [[5.0, 6.0], [7.0, 8.0]])
    assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, _triple_loop(a, b), rtol=1e-13)


def test_matmul_inner_mismatch_raises():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_rules(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    g = rng.standard_normal((3, 2))
    backward((T.matmul(a, b) * Tensor(g)).sum())
    assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


# -- conv ----------------------------------------------------------------------------------

def _conv_oracle(x, k, bias, stride, pad, mask=None):
    if mask is not None:
        k = k * mask[:, :, None, None]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    kk = k.shape[0]
    ho = (x.shape[0] + 2 * pad - kk) // stride + 1
    wo = (x.shape[1] + 2 * pad - kk) // stride + 1
    out = np.zeros((ho, wo, k.shape[3]))
    for i in range(ho):
        for j in range(wo):
            win = xp[i * stride:i * stride + kk, j * stride:j * stride + kk]
            out[i, j] = np.einsum("abc,abcd->d", win, k) + bias
    return out


def test_conv_scalar_affine():
    out = T.conv2d(Tensor([[[3.0]]]), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([1.0]))
    assert_array_equal(out.data, [[[7.0]]])


def test_conv_counts_overlap():
    out = T.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), None, 1, 1).data[..., 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_masked_conv_matches_sliding_window_oracle(rng):
    from informer_codec.layers import causal_mask

    x, k, b = rng.standard_normal((8, 8, 2)), rng.standard_normal((5, 5, 2, 3)), rng.standard_normal(3)
    mask = causal_mask(5)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), 1, 2, mask)
    assert_allclose(out.data, _conv_oracle(x, k, b, 1, 2, mask), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv_matches_oracle(rng, stride, pad):
    x = rng.standard_normal((7, 7, 3))
    k, b = rng.standard_normal((3, 3, 3, 2)), rng.standard_normal(2)
    if (7 + 2 * pad - 3) % stride:
        with pytest.raises(ValueError):
            T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
        return
    assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data,
                    _conv_oracle(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_mask_and_even_kernel(rng):
    x = Tensor(rng.standard_normal((5, 5, 1)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.ones((3, 3, 1, 1))), None, 1, 1, np.ones((5, 5)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.ones((2, 2, 1, 1))), None, 1, 0)


def test_all_ones_mask_is_bitwise_identical(rng):
    x, k = Tensor(rng.standard_normal((6, 6, 2))), Tensor(rng.standard_normal((5, 5, 2, 3)))
    assert_array_equal(T.conv2d(x, k, None, 1, 2, np.ones((5, 5))).data, T.conv2d(x, k, None, 1, 2).data)


def test_masked_taps_receive_zero_gradient(rng):
    from informer_codec.layers import causal_mask

    x, k = _rand(rng, 6, 6, 2), _rand(rng, 5, 5, 2, 2)
    mask = causal_mask(5)
    backward(T.conv2d(x, k, None, 1, 2, mask).sum())
    assert np.all(k.grad[mask == 0] == 0)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((4, 4, 3))
    k = rng.standard_normal((5, 5, 2, 3))
    z = rng.standard_normal((8, 8, 2))
    up = T.conv_transpose2d(Tensor(x), Tensor(k.transpose(0, 1, 3, 2)), None, 2, 2, 1).data
    down = T.conv2d(Tensor(z), Tensor(k), None, 2, (2, 1)).data
    assert up.shape == (8, 8, 2)
    assert_allclose(np.sum(up * z), np.sum(x * down), rtol=1e-12)


# -- reductions, softmax, structure ---------------------------------------------------------

def test_softmax_examples():
    assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert_allclose(out, [1.0, 0.0], atol=1e-300)
    with pytest.raises(ValueError):
        T.softmax(Tensor([np.inf, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    assert abs(T.softmax(Tensor(np.array(values))).data.sum() - 1.0) < 1e-12


def test_reduce_and_concat():
    assert_array_equal(T.reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), 0).data, [4.0, 6.0])
    with pytest.raises(ValueError):
        T.reduce("sum", Tensor([1.0]), 3)
    with pytest.raises(ValueError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)
    assert T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1)))], axis=1).shape == (2, 4)


# -- backward ---------------------------------------------------------------------------------

def test_square_gradient():
    w = Tensor([3.0], requires_grad=True)
    backward((w * w).sum())
    assert_array_equal(w.grad, [6.0])


def test_unused_parameter_gets_zero_grad():
    from informer_codec.layers import Linear

    lin = Linear(2, 2, T.RngState(0))
    unused = Tensor(np.ones(3), requires_grad=True)
    lin.extra = unused
    lin.zero_grad()
    backward(lin(Tensor(np.ones((1, 2)))).sum())
    assert_array_equal(unused.grad, np.zeros(3))


def test_backward_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2.0)
    loss = (w * w).sum()
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_gradients_accumulate_once_per_use():
    w = Tensor([2.0], requires_grad=True)
    backward((w * w * w).sum())
    assert_allclose(w.grad, [12.0])


def test_noise_sample_receives_no_gradient():
    from informer_codec.entropy import quantize

    x = Tensor(np.zeros(4), requires_grad=True)
    y = quantize(x, "train_noise", T.RngState(0))
    backward((y * y).sum())
    assert_allclose(x.grad, 2 * y.data)


def test_softmax_cross_entropy_grad_check(rng):
    logits = _rand(rng, 3, 5)
    target = np.eye(5)[[0, 3, 1]]

    def f(z):
        return -(T.log(T.softmax(z, axis=-1)) * Tensor(target)).sum()

    assert grad_check(f, [logits]) < 1e-5


def test_grad_check_examples(rng):
    w = _rand(rng, 4)
    assert grad_check(lambda v: (v * v).sum(), [w]) < 1e-8
    c = _rand(rng, 3)
    assert grad_check(lambda v: (v * 0.0).sum() + 5.0, [c]) == 0.0


def test_grad_check_rejects_non_finite():
    w = Tensor([1e-5], requires_grad=True)
    with pytest.raises((FloatingPointError, ValueError)):
        grad_check(lambda v: T.log(v).sum(), [w], h=1e-4)


_UNARY = ["exp", "square", "tanh", "sigmoid", "softplus", "erfc", "neg"]


@pytest.mark.parametrize("op", _UNARY)
def test_unary_grad_check(rng, op):
    x = _rand(rng, 2, 3)
    assert grad_check(lambda v: getattr(T, op)(v).sum(), [x]) < 1e-5


def test_domain_ops_grad_check(rng):
    x = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
    for op in (T.log, T.sqrt):
        assert grad_check(lambda v: (op(v) * v).sum(), [x]) < 1e-5
    y = Tensor(np.array([-1.5, -0.4, 0.3, 2.0]), requires_grad=True)
    assert grad_check(lambda v: (T.leaky_relu(v, 0.01) * v).sum(), [y]) < 1e-5
    assert grad_check(lambda v: (T.absolute(v) * v).sum(), [y]) < 1e-5
    assert grad_check(lambda v: (T.clamp_min(v, 0.0) * v).sum(), [y]) < 1e-5


def test_binary_and_structural_grad_check(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 3)
    d = Tensor(rng.uniform(1.0, 2.0, 3), requires_grad=True)
    assert grad_check(lambda u, v: ((u + v) * (u - v)).sum(), [a, b]) < 1e-5
    assert grad_check(lambda u, v: (u / v).sum(), [a, d]) < 1e-5
    assert grad_check(lambda u: T.square(T.concat([u, u * 2.0], 0).reshape(3, 4).transpose()).sum(), [a]) < 1e-5
    assert grad_check(lambda u: T.square(u[1:, ::2]).sum() + T.square(u.mean(axis=0)).sum(), [a]) < 1e-5
    assert grad_check(lambda u: T.square(T.pad(u, ((1, 0), (0, 2)))).sum(), [a]) < 1e-5
    assert grad_check(lambda u: T.square(u[np.array([0, 0, 1])]).sum(), [a]) < 1e-5


def test_conv_grad_check(rng):
    from informer_codec.layers import causal_mask

    x, k, bias = _rand(rng, 6, 6, 2), _rand(rng, 5, 5, 2, 3), _rand(rng, 3)
    assert grad_check(lambda a, w, c: T.square(T.conv2d(a, w, c, 2, (2, 1))).sum(), [x, k, bias]) < 1e-5
    assert grad_check(lambda a, w: T.square(T.conv2d(a, w, None, 1, 2, causal_mask(5))).sum(), [x, k]) < 1e-5
    z, kt = _rand(rng, 3, 3, 2), _rand(rng, 5, 5, 2, 2)
    assert grad_check(lambda a, w: T.square(T.conv_transpose2d(a, w, None, 2, 2, 1)).sum(), [z, kt]) < 1e-5


def test_matmul_batched_grad_check(rng):
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 2)
    assert grad_check(lambda u, v: T.square(u @ v).sum(), [a, b]) < 1e-5


# -- determinism and RNG ------------------------------------------------------------------------

def test_forward_is_deterministic(rng):
    x, k = rng.standard_normal((8, 8, 3)), rng.standard_normal((5, 5, 3, 4))
    a = T.conv2d(Tensor(x), Tensor(k), None, 2, (2, 1)).data
    b = T.conv2d(Tensor(x), Tensor(k), None, 2, (2, 1)).data
    assert_array_equal(a, b)


def test_rng_state_round_trip():
    r = T.RngState(99)
    r.uniform(0, 1, 5)
    saved = r.get_state()
    first = r.normal(7)
    assert_array_equal(T.RngState.from_state(saved).normal(7), first)
    assert_array_equal(T.RngState(5).uniform(0, 1, 4), T.RngState(5).uniform(0, 1, 4))


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = w * 3.0
    assert y._node is None
    assert len(T.current_tape()) == 0


def test_count_macs_for_matmul():
    with T.count_macs() as counter:
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert counter[0] == 60
