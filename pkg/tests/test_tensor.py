import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitcaps import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def conv_loops(x, k, stride, pad):
    """Direct six-loop cross-correlation, NCHW."""
    n, c, h, w = x.shape
    kk, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, kk, ho, wo))
    for b in range(n):
        for o in range(kk):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = (patch * k[o]).sum()
    return out


def pool_loops(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    arg = {}
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, where = -np.inf, None
                    for di in range(window):
                        for dj in range(window):
                            v = x[b, ch, i * stride + di, j * stride + dj]
                            if v > best:
                                best, where = v, (i * stride + di, j * stride + dj)
                    out[b, ch, i, j] = best
                    arg[(b, ch, i, j)] = where
    return out, arg


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_loops(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 2))
        np.testing.assert_allclose(T.conv2d(x, k, stride, pad), conv_loops(x, k, stride, pad),
                                   rtol=0, atol=1e-12)

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        k = np.arange(9.0).reshape(1, 1, 3, 3)
        # a single top-left impulse picks up the kernel's top-left tap at the origin
        assert T.conv2d(x, k, 1, 0)[0, 0, 0, 0] == 0.0
        assert T.conv2d(x, k, 1, 2)[0, 0, 2, 2] == 0.0
        assert T.conv2d(x, k, 1, 2)[0, 0, 0, 0] == 8.0

    def test_backward_is_adjoint(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out, cache = T.conv2d_forward(x, k, 2, 1)
        dout = rng.normal(size=out.shape)
        dx, _ = T.conv2d_backward(dout, cache)
        # <conv(x), dout> is linear in x, so its gradient is dx
        y = rng.normal(size=x.shape)
        assert np.isclose((T.conv2d(y, k, 2, 1) * dout).sum(), (y * dx).sum(), rtol=1e-12)

    def test_skip_input_grad(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        k = rng.normal(size=(1, 2, 3, 3))
        out, cache = T.conv2d_forward(x, k, 1, 1)
        dx, dk = T.conv2d_backward(np.ones_like(out), cache, need_input_grad=False)
        assert dx is None and dk.shape == k.shape

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))

    def test_kernel_too_large(self, rng):
        with pytest.raises(ValueError, match="does not fit"):
            T.conv2d(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 3, 3)))


class TestMaxPool:
    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 2), (2, 1)])
    def test_matches_loops(self, rng, window, stride):
        x = rng.normal(size=(2, 3, 7, 6))
        want, _ = pool_loops(x, window, stride)
        np.testing.assert_array_equal(T.max_pool2d(x, window, stride), want)

    def test_backward_routes_to_argmax(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        out, cache = T.max_pool2d_forward(x, 2)
        dout = rng.normal(size=out.shape)
        dx = T.max_pool2d_backward(dout, cache)
        _, arg = pool_loops(x, 2, 2)
        want = np.zeros_like(x)
        for (b, c, i, j), (r, s) in arg.items():
            want[b, c, r, s] += dout[b, c, i, j]
        np.testing.assert_array_equal(dx, want)

    def test_ties_go_to_first_row_major(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = T.max_pool2d_forward(x, 2)
        dx = T.max_pool2d_backward(np.full(out.shape, 5.0), cache)
        np.testing.assert_array_equal(dx[0, 0], [[5.0, 0.0], [0.0, 0.0]])

    def test_tie_on_second_row(self):
        x = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
        out, cache = T.max_pool2d_forward(x, 2)
        dx = T.max_pool2d_backward(np.ones(out.shape), cache)
        np.testing.assert_array_equal(dx[0, 0], [[0.0, 1.0], [0.0, 0.0]])

    def test_window_larger_than_input(self):
        with pytest.raises(ValueError):
            T.max_pool2d(np.zeros((1, 1, 1, 3)), 2)


class TestElementwise:
    def test_linear(self, rng):
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        np.testing.assert_allclose(T.linear(x, W, b), x @ W + b)

    def test_leaky_relu(self):
        x = np.array([-2.0, -0.0, 0.0, 3.0])
        out, cache = T.leaky_relu_forward(x, 0.01)
        np.testing.assert_array_equal(out, [-0.02, 0.0, 0.0, 3.0])
        np.testing.assert_array_equal(T.leaky_relu_backward(np.ones(4), cache), [0.01, 0.01, 0.01, 1.0])

    def test_sigmoid_extremes(self):
        s = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])

    def test_softmax_rows(self, rng):
        p = T.softmax(rng.normal(size=(5, 7)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)
        assert np.all(p >= 0)

    def test_softmax_shift_invariant(self, rng):
        z = rng.normal(size=(2, 4))
        np.testing.assert_allclose(T.softmax(z), T.softmax(z + 1e3), atol=1e-15)

    def test_cross_entropy_value(self):
        p = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]])
        assert np.isclose(T.cross_entropy(p, [0, 1]), -(np.log(0.5) + np.log(0.8)) / 2)

    def test_cross_entropy_clamps_zero(self):
        p = np.array([[1.0, 0.0]])
        assert np.isclose(T.cross_entropy(p, [1]), -np.log(T.LOG_CLAMP))
        assert np.all(np.isfinite(T.cross_entropy_backward(p, [1])))

    def test_cross_entropy_bad_label(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(np.full((1, 3), 1 / 3), [3])

    def test_softmax_ce_gradient_closed_form(self, rng):
        z = rng.normal(size=(4, 5))
        y = np.array([0, 4, 2, 2])
        p = T.softmax(z)
        dz = T.softmax_backward(T.cross_entropy_backward(p, y), p)
        onehot = np.eye(5)[y]
        np.testing.assert_allclose(dz, (p - onehot) / 4, atol=1e-15)


class TestDropout:
    def test_eval_is_identity(self, rng):
        x = rng.normal(size=(3, 3))
        out, mask = T.dropout_forward(x, 0.25, False, None)
        assert out is x and mask is None

    def test_inverted_scaling(self, rng):
        x = np.ones((200, 200))
        out, mask = T.dropout_forward(x, 0.25, True, rng)
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1 / 0.75)
        assert abs(out.mean() - 1.0) < 0.02
        np.testing.assert_array_equal(T.dropout_backward(x, mask), out)

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            T.dropout_forward(np.ones(3), 0.5, True, None)


class TestInitAndAdam:
    def test_glorot_bounds(self, rng):
        w = T.glorot_uniform(rng, (300, 200), 300, 200)
        a = np.sqrt(6 / 500)
        assert w.min() >= -a and w.max() <= a
        assert w.max() > 0.95 * a and w.min() < -0.95 * a

    def test_adam_matches_hand_update(self):
        p = {"w": np.array([1.0, -2.0])}
        state = T.AdamState.zeros_like(p)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
        T.adam_step(p, {"w": g1}, state, lr=0.1)
        T.adam_step(p, {"w": g2}, state, lr=0.1)
        w = np.array([1.0, -2.0])
        m = v = np.zeros(2)
        for t, g in enumerate([g1, g2], 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-15)
        assert state.t == 2

    def test_first_step_moves_by_lr(self):
        p = {"w": np.zeros(3)}
        T.adam_step(p, {"w": np.array([3.0, -0.01, 100.0])}, T.AdamState.zeros_like(p), lr=1e-4)
        np.testing.assert_allclose(p["w"], [-1e-4, 1e-4, -1e-4], rtol=1e-6)

    def test_absent_grads_leave_params(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        T.adam_step(p, {"a": np.ones(2)}, T.AdamState.zeros_like(p))
        np.testing.assert_array_equal(p["b"], 1.0)
        assert not np.array_equal(p["a"], 1.0)


class TestGradientChecking:
    def test_numerical_gradient_of_quadratic(self, rng):
        A = rng.normal(size=(3, 3))
        x = rng.normal(size=3)
        g = T.numerical_gradient(lambda: float(x @ A @ x), x)
        np.testing.assert_allclose(g, (A + A.T) @ x, rtol=1e-8)

    def test_relative_error_norms(self):
        assert T.relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
        assert np.isclose(T.relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])), 1.0)
        assert T.relative_error(np.zeros(2), np.zeros(2)) == 0.0

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=4)

        def f():
            return float((x ** 3).sum()), {"x": 2 * x ** 2}
        assert T.finite_diff_check(f, {"x": x}) > 0.1

    def test_point_restored(self, rng):
        x = rng.normal(size=5)
        before = x.copy()
        T.finite_diff_check(lambda: (float((x ** 2).sum()), {"x": 2 * x}), {"x": x})
        np.testing.assert_array_equal(x, before)

    def test_kinked_probes_are_replaced(self):
        # |x| has a kink at 0; the entry sitting on it must be skipped
        x = np.array([0.0, 1.0, -2.0])

        def f():
            return float(np.abs(x).sum()), {"x": np.sign(x) + (x == 0) * 7.0}
        report = {}
        err = T.finite_diff_check(f, {"x": x}, max_entries=2, report=report,
                                  signature=lambda: (x > 0).tobytes() + (x < 0).tobytes())
        assert err < 1e-9

    def test_grad_record_shape_check(self):
        with pytest.raises(ValueError):
            T.GradRecord("w", np.zeros(2), np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2), st.integers(0, 10_000))
def test_conv_shapes_property(stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 6, 5))
    k = r.normal(size=(3, 2, 3, 3))
    out = T.conv2d(x, k, stride, pad)
    assert out.shape == (1, 3, (6 + 2 * pad - 3) // stride + 1, (5 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(out, conv_loops(x, k, stride, pad), atol=1e-12)
