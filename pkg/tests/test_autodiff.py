import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poservq import autodiff as ad
from poservq.autodiff import AutodiffError, ShapeError, Tape

from conftest import assert_grad_close, central_diff


def naive_conv1d(x, w, b, stride, pad):
    c_in, t = x.shape
    c_out, _, width = w.shape
    xp = np.zeros((c_in, t + 2 * pad))
    xp[:, pad : pad + t] = x
    t_out = (t + 2 * pad - width) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for j in range(t_out):
            acc = 0.0 if b is None else b[o]
            for c in range(c_in):
                for k in range(width):
                    acc += w[o, c, k] * xp[c, j * stride + k]
            out[o, j] = acc
    return out


def grad_check(build, *arrays, seed=0):
    """Compare tape gradients of ``build(tape, *leaves)`` against central differences."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    grads = tape.backward(build(tape, *leaves))
    for i, a in enumerate(arrays):
        def f(v, i=i):
            t = Tape()
            args = [t.leaf(v if j == i else arrays[j]) for j in range(len(arrays))]
            return build(t, *args).item()

        assert_grad_close(grads[leaves[i]], central_diff(f, a))


# forward values -----------------------------------------------------------


def test_relu_example():
    t = Tape()
    assert ad.relu(t.constant([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]


def test_conv1d_length_example():
    t = Tape()
    y = ad.conv1d(t.constant(np.ones((1, 64))), t.constant(np.ones((1, 1, 3))), stride=2, pad=1)
    assert y.shape == (1, 32)
    assert ad.conv1d_output_length(64, 3, 2, 1) == 32


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    t = Tape()
    np.testing.assert_allclose(ad.matmul(t.constant(a), t.constant(b)).value, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad,width", [(1, 0, 1), (1, 1, 3), (2, 1, 4), (2, 0, 3), (3, 2, 5)])
def test_conv1d_matches_naive_loops(rng, stride, pad, width):
    x, w, b = rng.normal(size=(3, 11)), rng.normal(size=(2, 3, width)), rng.normal(size=2)
    t = Tape()
    y = ad.conv1d(t.constant(x), t.constant(w), t.constant(b), stride=stride, pad=pad)
    np.testing.assert_allclose(y.value, naive_conv1d(x, w, b, stride, pad), atol=1e-12)


def test_conv1d_batched_equals_per_item(rng):
    x, w = rng.normal(size=(4, 3, 9)), rng.normal(size=(5, 3, 3))
    t = Tape()
    y = ad.conv1d(t.constant(x), t.constant(w), stride=2, pad=1).value
    for i in range(4):
        np.testing.assert_allclose(y[i], naive_conv1d(x[i], w, None, 2, 1), atol=1e-12)


def test_upsample_repeats_frames():
    t = Tape()
    y = ad.upsample1d(t.constant([[1.0, 2.0, 3.0]]), 2)
    assert y.value.tolist() == [[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]]


def test_tensor_op_dispatch_by_name(rng):
    t = Tape()
    x = t.constant(rng.normal(size=(2, 5)))
    assert ad.tensor_op("nearest-upsample-1d", x, factor=3).shape == (2, 15)
    assert ad.tensor_op("l2norm-squared", x).item() == pytest.approx(np.sum(x.value**2))
    assert ad.tensor_op("mul-elementwise", x, x).value.tolist() == (x.value**2).tolist()
    with pytest.raises(AutodiffError):
        ad.tensor_op("softmax", x)


# errors -------------------------------------------------------------------


def test_shape_errors_name_the_op():
    t = Tape()
    with pytest.raises(ShapeError, match="add") as exc:
        ad.add(t.constant(np.ones(3)), t.constant(np.ones(4)))
    assert list(exc.value.shapes) == [(3,), (4,)]
    with pytest.raises(ShapeError, match="conv1d"):
        ad.conv1d(t.constant(np.ones((3, 8))), t.constant(np.ones((2, 4, 3))))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(AutodiffError):
        Tape().leaf([1.0, np.nan])
    with pytest.raises(AutodiffError):
        Tape().constant([np.inf])


def test_non_scalar_loss_rejected():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(AutodiffError, match="scalar"):
        t.backward(x)


def test_values_are_read_only():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ValueError):
        x.value[0] = 5.0


# backward -----------------------------------------------------------------


def test_sum_gradient_is_ones(rng):
    t = Tape()
    x = t.leaf(rng.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(t.backward(ad.sum_(x))[x], np.ones((2, 3, 4)))


def test_stop_gradient_example():
    t = Tape()
    x = t.leaf([2.0])
    loss = ad.sum_(ad.mul(ad.stop_gradient(x), x))
    assert t.backward(loss)[x].tolist() == [2.0]


def test_stop_gradient_forward_and_block():
    t = Tape()
    x = t.leaf([1.0, 2.0, 3.0])
    y = ad.stop_gradient(x)
    assert y.value.tolist() == [1.0, 2.0, 3.0]
    g = t.backward(ad.sum_(y))
    assert g[x].tolist() == [0.0, 0.0, 0.0]
    assert not g.reached(x)


def test_unreached_nodes_get_zero_gradient(rng):
    t = Tape()
    x, unused = t.leaf(rng.normal(size=3)), t.leaf(rng.normal(size=(2, 2)))
    g = t.backward(ad.sum_(x))
    np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))


def test_backward_is_deterministic(rng):
    x0, w0 = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 3))

    def run():
        t = Tape()
        x, w = t.leaf(x0), t.leaf(w0)
        g = t.backward(ad.mean(ad.huber(ad.conv1d(x, w, stride=2, pad=1))))
        return g[x], g[w]

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_huber_continuous_at_threshold():
    for delta in (1.0, 0.3):
        for side in (1.0, -1.0):
            lo, hi = side * delta * (1 - 1e-12), side * delta * (1 + 1e-12)
            t = Tape()
            xs = t.leaf([lo, hi])
            y = ad.huber(xs, delta)
            g = t.backward(ad.sum_(y))[xs]
            assert abs(y.value[0] - y.value[1]) < 1e-9
            assert abs(g[0] - g[1]) < 1e-9


OP_CASES = {
    "add": (lambda t, a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (3, 4)]),
    "sub": (lambda t, a, b: ad.sqnorm(ad.sub(a, b)), [(5,), (5,)]),
    "mul": (lambda t, a, b: ad.sum_(ad.mul(ad.mul(a, b), a)), [(2, 3), (2, 3)]),
    "scale": (lambda t, a: ad.sqnorm(ad.scale(a, -1.7)), [(4,)]),
    "matmul": (lambda t, a, b: ad.sqnorm(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul-batched": (lambda t, a, b: ad.sqnorm(ad.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "conv1d": (lambda t, x, w, b: ad.sqnorm(ad.conv1d(x, w, b, stride=2, pad=1)), [(2, 3, 9), (4, 3, 4), (4,)]),
    "conv1d-unbatched": (lambda t, x, w: ad.sqnorm(ad.conv1d(x, w, pad=1)), [(3, 7), (2, 3, 3)]),
    "relu": (lambda t, a: ad.sqnorm(ad.relu(a)), [(10,)]),
    "upsample": (lambda t, a: ad.sqnorm(ad.mul(ad.upsample1d(a, 3), ad.upsample1d(a, 3))), [(2, 4)]),
    "sum": (lambda t, a: ad.sum_(ad.mul(a, a)), [(3, 3)]),
    "mean": (lambda t, a: ad.mean(ad.mul(a, a)), [(3, 3)]),
    "sqnorm": (lambda t, a: ad.sqnorm(a), [(6,)]),
    "huber": (lambda t, a: ad.sum_(ad.huber(ad.scale(a, 2.0))), [(12,)]),
    "abs": (lambda t, a: ad.sum_(ad.abs_(a)), [(8,)]),
    "transpose": (lambda t, a: ad.sqnorm(ad.matmul(ad.transpose(a, (1, 0)), a)), [(3, 2)]),
    "narrow": (lambda t, a: ad.sqnorm(ad.narrow(a, -1, 1, 4)), [(2, 5)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("point", range(10))
def test_op_gradients_match_finite_differences(name, point):
    build, shapes = OP_CASES[name]
    rng = np.random.default_rng([point, len(name)])
    arrays = [rng.normal(size=s) for s in shapes]
    grad_check(build, *arrays)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(4, 12),
       st.integers(0, 2**31))
def test_conv1d_gradient_property(c_in, c_out, stride, pad, t_len, seed):
    rng = np.random.default_rng(seed)
    width = int(rng.integers(1, min(t_len + 2 * pad, 5) + 1))
    x, w = rng.normal(size=(c_in, t_len)), rng.normal(size=(c_out, c_in, width))
    grad_check(lambda t, a, b: ad.sqnorm(ad.conv1d(a, b, stride=stride, pad=pad)), x, w)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_shape_and_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    t = Tape()
    np.testing.assert_allclose(ad.matmul(t.constant(a), t.constant(b)).value,
                               np.einsum("ik,kj->ij", a, b), atol=1e-12)
