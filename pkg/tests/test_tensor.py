import numpy as np
import pytest

from fmtnet import tensor as T
from fmtnet.errors import InvalidArgument
from fmtnet.tensor import RunningStats, Tensor


def numeric_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x.data)
    with T.no_grad():
        for index in np.ndindex(x.shape):
            original = x.data[index]
            x.data[index] = original + h
            plus = f().item()
            x.data[index] = original - h
            minus = f().item()
            x.data[index] = original
            grad[index] = (plus - minus) / (2 * h)
    return grad


def analytic_grad(f, x: Tensor) -> np.ndarray:
    x.zero_grad()
    T.backward(f())
    return x.grad


def assert_gradients_match(f, *inputs, rtol=1e-4):
    for x in inputs:
        np.testing.assert_allclose(analytic_grad(f, x), numeric_grad(f, x), rtol=rtol, atol=1e-7)


def conv_oracle(x, k, b, stride, padding):
    c_out, c_in, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[1] + 2 * padding - kh) // stride + 1
    ow = (x.shape[2] + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += k[o, ci, ky, kx] * xp[ci, i * stride + ky, j * stride + kx]
                out[o, i, j] = acc + b[o]
    return out


class TestConv2d:
    def test_zero_input_gives_zero_output(self, rng):
        out = T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(np.zeros(2)), padding=1)
        assert np.all(out.data == 0)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle_exactly(self, rng, stride, padding):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_array_equal(out.data, conv_oracle(x, k, b, stride, padding))

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidArgument):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_gradients(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(2, 5, 5)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        weights = Tensor(rng.normal(size=(3, 3, 3)))
        assert_gradients_match(lambda: T.sum_(T.conv2d(x, k, b, stride=2, padding=1) * weights), x, k, b)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_softmax_uniform(self):
        out = T.softmax(Tensor(np.full(13, 0.7)))
        np.testing.assert_allclose(out.data, np.full(13, 1 / 13))

    def test_clip_saturates(self):
        assert T.clip(Tensor(1.7), -1.0, 1.0).item() == 1.0

    def test_broadcast_mismatch(self):
        with pytest.raises(InvalidArgument):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_matmul_matches_loop(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = 0.0
                for k in range(5):
                    acc += a[i, k] * b[k, j]
                expected[i, j] = acc
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_sum_is_left_to_right(self, rng):
        x = rng.normal(size=(4, 6))
        acc = 0.0
        for v in x.reshape(-1):
            acc += v
        assert T.sum_(Tensor(x)).item() == acc

    @pytest.mark.parametrize("op", [T.exp, T.tanh, T.sigmoid, T.sin, T.cos, lambda v: T.softmax(v, axis=0), lambda v: T.log_softmax(v, axis=0)])
    def test_smooth_op_gradients(self, rng, op):
        x = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        weights = Tensor(rng.normal(size=(3, 4)))
        assert_gradients_match(lambda: T.sum_(op(x) * weights), x)

    def test_binary_op_gradients_with_broadcast(self, rng):
        a = Tensor(rng.uniform(0.5, 2, size=(2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2, size=(1, 3, 3)), requires_grad=True)
        assert_gradients_match(lambda: T.sum_(a * b + a / b - b), a, b)

    def test_relu_and_clip_gradients_away_from_kinks(self, rng):
        values = rng.uniform(-2, 2, size=20)
        values = values[(np.abs(values) > 1e-2) & (np.abs(np.abs(values) - 1) > 1e-2)]
        x = Tensor(values, requires_grad=True)
        assert_gradients_match(lambda: T.sum_(T.relu(x) * x + T.clip(x, -1.0, 1.0)), x)

    def test_relu_kink_has_zero_gradient(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        T.backward(T.sum_(T.relu(x)))
        assert x.grad[0] == 0.0


class TestBatchnorm:
    def test_constant_channel_train_mode_is_zero(self):
        out = T.batchnorm(Tensor(np.full((2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats(2), training=True)
        np.testing.assert_array_equal(out.data, np.zeros((2, 3, 3)))

    def test_zero_gamma_gives_beta(self, rng):
        beta = np.array([0.3, -0.7])
        out = T.batchnorm(Tensor(rng.normal(size=(2, 4, 4))), Tensor(np.zeros(2)), Tensor(beta), RunningStats(2), training=True)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[:, None, None], (2, 4, 4)))

    def test_matches_two_pass_statistics(self, rng):
        x = rng.normal(size=(2, 4, 4))
        stats = RunningStats(2)
        out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True)
        for c in range(2):
            mean = x[c].sum() / 16
            var = ((x[c] - mean) ** 2).sum() / 16
            np.testing.assert_allclose(out.data[c], (x[c] - mean) / np.sqrt(var + 1e-5), rtol=1e-12)
            assert stats.mean[c] == pytest.approx(0.1 * mean)
            assert stats.var[c] == pytest.approx(0.9 + 0.1 * var)

    def test_eval_mode_uses_running_stats(self, rng):
        stats = RunningStats(2)
        stats.mean, stats.var = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        x = rng.normal(size=(2, 3, 3))
        out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=False)
        np.testing.assert_allclose(out.data[0], (x[0] - 1.0) / np.sqrt(4.0 + 1e-5))
        np.testing.assert_array_equal(stats.mean, [1.0, -1.0])

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = Tensor(rng.uniform(-2, 2, size=(2, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = Tensor(rng.uniform(-1, 1, size=2), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 3, 3)))
        stats = RunningStats(2)
        assert_gradients_match(lambda: T.sum_(T.batchnorm(x, gamma, beta, stats, training) * weights), x, gamma, beta)

    def test_feature_vector_gradients(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=6), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
        weights = Tensor(rng.normal(size=6))
        stats = RunningStats(6)
        assert_gradients_match(lambda: T.sum_(T.batchnorm(x, gamma, Tensor(np.zeros(6)), stats, True) * weights), x, gamma)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.sum_(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(InvalidArgument):
            T.backward(Tensor(np.zeros(2), requires_grad=True) * 2.0)

    def test_tape_is_topological(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = T.exp(x)
        loss = T.sum_(y * y + y)
        tape = T.Tape.record(loss)
        position = {id(node): i for i, node in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert tape.nodes[-1] is loss

    def test_composite_network(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(2, 5, 5)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
        gamma = Tensor(np.ones(3), requires_grad=True)
        stats = RunningStats(3)

        def loss():
            y = T.conv2d(x, k, Tensor(np.zeros(3)), padding=1)
            y = T.batchnorm(y, gamma, Tensor(np.full(3, 0.05)), stats, training=True)
            return T.mean(T.relu(y) * T.relu(y))

        assert_gradients_match(loss, x, k, gamma)

    def test_linearity(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        first = analytic_grad(lambda: T.sum_(T.exp(x)), x).copy()
        second = analytic_grad(lambda: T.sum_(x * x), x).copy()
        combined = analytic_grad(lambda: 2.0 * T.sum_(T.exp(x)) - 3.0 * T.sum_(x * x), x)
        np.testing.assert_allclose(combined, 2.0 * first - 3.0 * second)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.is_leaf

    def test_unused_leaf_keeps_no_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.sum_(x))
        assert unused.grad is None


class TestImageOps:
    def test_pool_and_upsample_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 8, 8)))
        assert_gradients_match(lambda: T.sum_(T.upsample_nearest(T.avg_pool2d(x, 2), 4) * weights), x)

    def test_take_pixels_zero_fills(self):
        x = Tensor(np.arange(8, dtype=float).reshape(2, 2, 2), requires_grad=True)
        source = np.array([[3, -1], [0, 0]])
        out = T.take_pixels(x, source)
        np.testing.assert_array_equal(out.data[0], [[3.0, 0.0], [0.0, 0.0]])
        T.backward(T.sum_(out))
        np.testing.assert_array_equal(x.grad[0], [[2.0, 0.0], [0.0, 1.0]])

    def test_dropout_only_in_training(self, rng):
        x = Tensor(np.ones(100))
        assert T.dropout(x, 0.5, rng, training=False) is x
        dropped = T.dropout(x, 0.5, rng, training=True).data
        assert set(np.unique(dropped)) <= {0.0, 2.0}
