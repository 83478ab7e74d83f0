"""Autodiff kernel tests: forward values against naive oracles, gradients
against central finite differences, and optimizer behaviour."""

import numpy as np
import pytest

from partedvae.gradcheck import finite_difference_check
from partedvae.optim import Adam, AdamState, ReduceLROnPlateau, TrainingError, adam_step
from partedvae.tensor import (
    Tensor,
    concat,
    conv2d,
    conv2d_transpose,
    dense,
    leaky_relu,
    log_softmax,
    make_rng,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softplus,
)


def naive_conv2d(x, w, stride=2, pad=1):
    """Direct-summation convolution oracle, quadruple loop, no tricks."""
    b, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, f, ho, wo))
    for bi in range(b):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, fi, i, j] = (patch * w[fi]).sum()
    return out


class TestDense:
    def test_identity_weights(self):
        out = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_matrix_multiply(self):
        out = dense(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data, [[7.0, 9.0]])

    def test_bias_gradient_of_sum_is_ones(self):
        rng = make_rng(0)
        x = Tensor(rng.normal(size=(1, 4)))
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(np.zeros(5), requires_grad=True)
        dense(x, w, b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.ones(5))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="dense"):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestConv:
    def test_zero_input_gives_zero_output(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        k = Tensor(make_rng(1).normal(size=(3, 2, 4, 4)))
        assert np.all(conv2d(x, k).data == 0.0)
        y = Tensor(np.zeros((1, 3, 4, 4)))
        assert np.all(conv2d_transpose(y, k).data == 0.0)

    def test_ones_input_counts_valid_taps(self):
        x = np.ones((1, 1, 4, 4))
        k = np.ones((1, 1, 4, 4))
        got = conv2d(Tensor(x), Tensor(k)).data
        want = naive_conv2d(x, k)
        np.testing.assert_allclose(got, want)
        # with pad 1 every 4x4 window over the padded 6x6 grid sees 9 real taps
        np.testing.assert_array_equal(want, np.full((1, 1, 2, 2), 9.0))

    def test_forward_matches_naive_oracle(self):
        rng = make_rng(7)
        x = rng.normal(size=(2, 3, 8, 6))
        k = rng.normal(size=(4, 3, 4, 4))
        got = conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(got, naive_conv2d(x, k), rtol=1e-12, atol=1e-12)

    def test_undersized_input_raises(self):
        with pytest.raises(ValueError, match="smaller than kernel"):
            conv2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 4, 4))))

    def test_adjoint_identity(self):
        rng = make_rng(3)
        for _ in range(10):
            x = Tensor(rng.normal(size=(2, 3, 8, 8)))
            y = Tensor(rng.normal(size=(2, 5, 4, 4)))
            k = Tensor(rng.normal(size=(5, 3, 4, 4)))
            lhs = float((conv2d(x, k).data * y.data).sum())
            rhs = float((x.data * conv2d_transpose(y, k).data).sum())
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_transpose_doubles_spatial_size(self):
        y = Tensor(np.zeros((1, 4, 4, 4)))
        k = Tensor(np.zeros((4, 2, 4, 4)))
        assert conv2d_transpose(y, k).shape == (1, 2, 8, 8)

    def test_conv_gradients_match_finite_differences(self):
        rng = make_rng(11)
        x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 4, 4)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        tgt = rng.normal(size=(2, 3, 3, 3))

        def loss():
            d = conv2d(x, k, b) - Tensor(tgt)
            return (d * d).sum() * 0.5

        assert finite_difference_check(loss, [x, k, b]) < 1e-4

    def test_conv_transpose_gradients_match_finite_differences(self):
        rng = make_rng(13)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 4, 4)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        tgt = rng.normal(size=(2, 2, 6, 6))

        def loss():
            d = conv2d_transpose(x, k, b) - Tensor(tgt)
            return (d * d).sum() * 0.5

        assert finite_difference_check(loss, [x, k, b]) < 1e-4


class TestActivations:
    def test_softmax_uniform_on_equal_logits(self):
        np.testing.assert_allclose(softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = sigmoid(Tensor([-500.0, 500.0])).data
        assert np.all(np.isfinite(out))
        assert 0.0 <= out[0] < 1e-100 and out[1] == 1.0

    def test_log_softmax_matches_log_of_softmax(self):
        rng = make_rng(5)
        logits = rng.uniform(-30, 30, size=(50, 7))
        got = log_softmax(Tensor(logits)).data
        want = np.log(softmax(Tensor(logits)).data)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_softmax_rows_are_probability_vectors(self):
        rng = make_rng(6)
        probs = softmax(Tensor(rng.uniform(-40, 40, size=(200, 9)))).data
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


OP_CASES = {
    "add": lambda t, c: t + c,
    "add_broadcast": lambda t, c: (t + Tensor(c.data[0])).sum(axis=0),
    "sub": lambda t, c: c - t,
    "mul": lambda t, c: t * c,
    "div": lambda t, c: t / (c * c + 1.0),
    "pow": lambda t, c: (t * t + 1.0) ** 1.5,
    "exp": lambda t, c: (t * 0.3).exp(),
    "log": lambda t, c: (t * t + 0.5).log(),
    "sqrt": lambda t, c: (t * t + 0.5).sqrt(),
    "abs_offset": lambda t, c: (t + 0.37).abs(),
    "sum_axis": lambda t, c: (t.sum(axis=1, keepdims=True) * c).sum(axis=0),
    "mean": lambda t, c: t.mean(axis=0) * 3.0,
    "reshape": lambda t, c: t.reshape(-1) * 2.0,
    "transpose": lambda t, c: t.transpose(1, 0) * c.transpose(1, 0),
    "getitem": lambda t, c: t[1:, :2] * 3.0,
    "matmul": lambda t, c: t @ c.transpose(1, 0),
    "maximum": lambda t, c: (t + 0.29).maximum(0.0),
    "relu": lambda t, c: relu(t + 0.31),
    "leaky_relu": lambda t, c: leaky_relu(t + 0.31, 0.1),
    "sigmoid": lambda t, c: sigmoid(t * 2.0),
    "softplus": lambda t, c: softplus(t * 3.0),
    "softmax": lambda t, c: softmax(t) * c,
    "log_softmax": lambda t, c: log_softmax(t * 2.0),
    "concat": lambda t, c: concat([t, t * c], axis=1) * 0.5,
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    rng = make_rng(hash(name) % 2**32)
    t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 4)))

    def loss():
        out = OP_CASES[name](t, c)
        return (out * out).sum() * 0.5 if out.size > 1 else out

    assert finite_difference_check(loss, [t]) < 1e-5


class TestFiniteDifferenceHarness:
    def test_quadratic_is_exact_to_roundoff(self):
        p = Tensor(make_rng(2).uniform(0.2, 1.0, size=8), requires_grad=True)
        assert finite_difference_check(lambda: (p * p).sum() * 0.5, [p]) < 1e-9

    def test_unused_parameter_has_zero_gradient(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        loss = (used * used).sum()
        loss.backward()
        assert unused.grad is None
        assert finite_difference_check(lambda: (used * used).sum(), [used, unused]) < 1e-9

    def test_rejects_float32(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            finite_difference_check(lambda: (p * p).sum(), [p])


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        before = p.data.copy()
        adam_step([p], [np.zeros(2)], AdamState(learning_rate=0.1))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_lr_after_bias_correction(self):
        # m_hat = v_hat = 1 on step 1 with g = 1, so the update is
        # -lr / (1 + eps), i.e. 0.1 up to 1e-8.
        p = Tensor(np.array([0.0]), requires_grad=True)
        adam_step([p], [np.ones(1)], AdamState(learning_rate=0.1))
        assert abs(p.data[0] - (-0.1)) < 1e-8

    def test_identical_params_stay_identical(self):
        state = AdamState(learning_rate=0.05)
        a = Tensor(np.full(4, 0.7), requires_grad=True)
        b = Tensor(np.full(4, 0.7), requires_grad=True)
        g = make_rng(4).normal(size=4)
        for _ in range(25):
            adam_step([a, b], [g, g], state)
        np.testing.assert_array_equal(a.data, b.data)

    def test_non_finite_gradient_raises_with_diagnostic(self):
        p = Tensor(np.zeros(2), requires_grad=True, name="encoder.w")
        with pytest.raises(TrainingError, match="encoder.w"):
            adam_step([p], [np.array([np.nan, 0.0])], AdamState())

    def test_optimizer_class_steps_from_backward(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            ((p - 1.0) * (p - 1.0)).sum().backward()
            opt.step()
        assert abs(p.data[0] - 1.0) < 1e-2


class TestPlateauScheduler:
    def test_lr_never_increases_and_respects_floor(self):
        opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=0.1)
        sched = ReduceLROnPlateau([opt], factor=0.1, patience=0, min_lr=1e-3)
        seen = [opt.lr]
        sched.update(1.0)  # improvement over +inf
        for _ in range(5):
            sched.update(2.0)  # stalled
            seen.append(opt.lr)
        assert all(b <= a for a, b in zip(seen, seen[1:]))
        assert opt.lr == pytest.approx(1e-3)

    def test_improvement_resets_patience(self):
        opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=0.1)
        sched = ReduceLROnPlateau([opt], factor=0.5, patience=1, min_lr=1e-8)
        sched.update(1.0)
        sched.update(0.9)
        sched.update(0.95)  # 1 stalled epoch: within patience
        assert opt.lr == 0.1
        sched.update(0.95)
        assert opt.lr == 0.05


class TestDeterminism:
    def _train(self, seed):
        rng = make_rng(seed)
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        opt = Adam([w, b], lr=1e-2)
        for _ in range(30):
            x = Tensor(rng.normal(size=(8, 4)).astype(np.float32))
            opt.zero_grad()
            out = relu(dense(x, w, b))
            (out * out).sum().backward()
            opt.step()
        return w.data.copy(), b.data.copy()

    def test_same_seed_bitwise_identical(self):
        w1, b1 = self._train(123)
        w2, b2 = self._train(123)
        assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_different_seed_differs(self):
        w1, _ = self._train(123)
        w2, _ = self._train(124)
        assert not np.array_equal(w1, w2)


class TestGraphMechanics:
    def test_no_grad_blocks_graph_construction(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (p * 2.0).sum()
        assert not out.requires_grad

    def test_reused_tensor_accumulates_both_paths(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        (p * 3.0 + p * p).sum().backward()  # d/dp = 3 + 2p = 7
        assert p.grad[0] == pytest.approx(7.0)

    def test_shared_buffer_is_not_corrupted_by_fanout(self):
        # y = a + b feeds two consumers; a second accumulation into one
        # parent must not leak into the other
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        y = a + b
        (y.sum() + (a * 10.0).sum()).backward()
        np.testing.assert_array_equal(a.grad, np.full(3, 11.0))
        np.testing.assert_array_equal(b.grad, np.ones(3))
