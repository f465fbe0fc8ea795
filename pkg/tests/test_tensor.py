import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedbacknet.errors import ContractError, ShapeError
from feedbacknet.gradcheck import check_gradients, max_error
from feedbacknet.module import SGD, sgd_step
from feedbacknet.tensor import (
    ComputeTape,
    RunningStats,
    Rng,
    Tensor,
    add,
    avg_pool,
    backward,
    batchnorm,
    conv2d,
    elementwise,
    fully_connected,
    hadamard,
    no_grad,
    precision,
    scale,
    softmax,
    softmax_cross_entropy,
    tensor_sum,
)

from gradcases import OP_CASES, op_error


def naive_conv(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[s, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[s, o, i, j] = acc
    return out


class TestTensor:
    def test_rejects_non_positive_dims(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_default_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_grad_matches_data_length(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        tensor_sum(x).backward()
        assert x.grad.shape == x.shape


class TestConv2d:
    def test_sum_of_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_zero_weight_gives_bias(self):
        g = np.random.default_rng(0)
        out = conv2d(Tensor(g.normal(size=(2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))),
                     Tensor([0.5, -1.0, 2.0, 3.0]), stride=2, padding=1)
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([0.5, -1.0, 2.0, 3.0],
                                                                         dtype=np.float32)[None, :, None, None],
                                                                out.shape))

    @pytest.mark.parametrize("h,k,stride,padding", [(8, 3, 2, 1), (7, 3, 1, 1), (5, 5, 1, 0), (9, 3, 3, 0)])
    def test_output_size(self, h, k, stride, padding):
        out = conv2d(Tensor(np.ones((1, 2, h, h))), Tensor(np.ones((3, 2, k, k))), Tensor(np.zeros(3)),
                     stride, padding)
        assert out.shape[2] == (h + 2 * padding - k) // stride + 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_loops(self, seed):
        g = np.random.default_rng(seed)
        stride, padding = int(g.integers(1, 3)), int(g.integers(0, 2))
        x, w, b = g.normal(size=(2, 3, 4, 4)), g.normal(size=(2, 3, 3, 3)), g.normal(size=2)
        with precision(np.float64):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), atol=1e-5)

    def test_grouped_equals_separate_convs(self):
        g = np.random.default_rng(1)
        x, w, b = g.normal(size=(2, 4, 5, 5)), g.normal(size=(6, 2, 3, 3)), g.normal(size=6)
        with precision(np.float64):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1, groups=2).data
            first = conv2d(Tensor(x[:, :2]), Tensor(w[:3]), Tensor(b[:3]), 1, 1).data
            second = conv2d(Tensor(x[:, 2:]), Tensor(w[3:]), Tensor(b[3:]), 1, 1).data
        np.testing.assert_allclose(out, np.concatenate([first, second], axis=1), atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[1, 2, 4, 4\].*\[1, 3, 3, 3\]"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))

    def test_gradient_spec_case(self):
        # random 2x3x8x8 input, 4x3x3x3 weight, stride 2, padding 1; every element checked
        g = np.random.default_rng(3)
        with precision(np.float64):
            x = Tensor(g.normal(size=(2, 3, 8, 8)), requires_grad=True)
            w = Tensor(g.normal(size=(4, 3, 3, 3)), requires_grad=True)
            b = Tensor(g.normal(size=4), requires_grad=True)
            report = check_gradients(lambda: tensor_sum(conv2d(x, w, b, 2, 1)), {"x": x, "w": w, "b": b})
        assert max_error(report) < 1e-4


class TestBatchNorm:
    def test_constant_channel_gives_beta(self):
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        beta = Tensor([0.25, -0.5])
        out = batchnorm(x, Tensor(np.ones(2)), beta, "train", RunningStats(2))
        np.testing.assert_allclose(out.data[:, 0], 0.25, atol=1e-6)
        np.testing.assert_allclose(out.data[:, 1], -0.5, atol=1e-6)

    def test_identity_on_standardized_input(self):
        g = np.random.default_rng(0)
        x = g.normal(size=(64, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", RunningStats(3))
        np.testing.assert_allclose(out.data, x, atol=1e-3)

    def test_output_statistics(self):
        g = np.random.default_rng(1)
        x = g.normal(3.0, 2.0, size=(16, 3, 5, 5))
        gamma, beta = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 1.0])
        with precision(np.float64):
            out = batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), "train", RunningStats(3, np.float64)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, atol=1e-3)

    def test_running_stats_update(self):
        g = np.random.default_rng(2)
        x = g.normal(size=(4, 2, 3, 3))
        stats = RunningStats(2)
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", stats, momentum=0.1)
        n = 4 * 9
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-5)
        assert stats.updates == 1

    def test_eval_before_training_is_an_error(self):
        with pytest.raises(ContractError, match="train first or load a checkpoint"):
            batchnorm(Tensor(np.ones((2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "eval",
                      RunningStats(2))

    def test_train_needs_two_values(self):
        with pytest.raises(ContractError):
            batchnorm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train",
                      RunningStats(2))

    def test_eval_uses_running_stats(self):
        stats = RunningStats(1)
        stats.update(np.array([2.0]), np.array([4.0]), 1.0)
        out = batchnorm(Tensor(np.full((1, 1, 2, 2), 4.0)), Tensor(np.ones(1)), Tensor(np.zeros(1)), "eval", stats)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-5)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_tanh_zero(self):
        assert elementwise("tanh", Tensor([0.0])).data[0] == 0.0

    def test_hadamard(self):
        np.testing.assert_array_equal(elementwise("hadamard", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8, 15])

    def test_relu(self):
        np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    @pytest.mark.parametrize("op", ["add", "hadamard"])
    def test_shape_mismatch(self, op):
        with pytest.raises(ShapeError):
            elementwise(op, Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            elementwise("gelu", Tensor([1.0]))

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = elementwise("sigmoid", Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])


class TestAvgPool:
    def test_mean_of_window(self):
        out = avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 1)
        assert out.data.reshape(-1).tolist() == [2.5]

    def test_constant(self):
        np.testing.assert_allclose(avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5)), 2, 2).data, 1.5)

    def test_gradient_is_inverse_window_area(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)), requires_grad=True)
        tensor_sum(avg_pool(x, 2, 2)).backward()
        np.testing.assert_allclose(x.grad, 0.25)

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            avg_pool(Tensor(np.ones((1, 1, 2, 2))), 3, 1)


class TestFullyConnected:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        out = fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight(self):
        out = fully_connected(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 2))), Tensor([1.0, -2.0]))
        np.testing.assert_array_equal(out.data, [[1, -2], [1, -2]])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            fully_connected(Tensor(np.ones((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestSoftmaxCrossEntropy:
    @pytest.mark.parametrize("k", [2, 5, 12])
    def test_uniform_logits(self, k):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, k - 1])
        assert loss.item() == pytest.approx(math.log(k), rel=1e-6)

    def test_confident_logits(self):
        with precision(np.float64):
            loss = softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
        # -log sigmoid(20)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.random.default_rng(0).normal(size=(4, 5))
        with precision(np.float64):
            t = Tensor(z, requires_grad=True)
            softmax_cross_entropy(t, [0, 1, 2, 3]).backward()
        expected = softmax(z)
        expected[np.arange(4), [0, 1, 2, 3]] -= 1
        np.testing.assert_allclose(t.grad, expected / 4, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
    def test_softmax_rows_sum_to_one(self, n, k, seed, spread):
        z = np.random.default_rng(seed).normal(scale=spread, size=(n, k)).astype(np.float32)
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)


class TestBackward:
    def test_scale(self):
        x = Tensor([3.0], requires_grad=True)
        tensor_sum(scale(x, 2.0)).backward()
        assert x.grad.tolist() == [2.0]

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tensor_sum(hadamard(x, x)).backward()
        assert x.grad.tolist() == [2.0, 4.0]

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tensor_sum(hadamard(x, x))
        backward(y)
        backward(y)
        assert x.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(scale(x, 2.0))

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        a = hadamard(x, x)
        b = add(a, x)
        root = tensor_sum(add(a, b))
        tape = ComputeTape.record(root)
        order = list(tape)
        assert len(order) == len({id(t) for t in order})
        pos = {id(t): i for i, t in enumerate(order)}
        for t in order:
            for p in t._op.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(t)]
        backward(root, tape)
        # d/dx (2x^2 + x) = 4x + 1
        assert x.grad.tolist() == [5.0, 9.0]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = scale(x, 2.0)
        assert y.is_leaf and not y.requires_grad


class TestSgd:
    def test_plain_step(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -1.0], dtype=np.float32)
        sgd_step({"p": p}, lr=0.1, momentum=0.0, weight_decay=0.0, velocity={})
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_zero_gradient_keeps_params(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        sgd_step({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.0, velocity={})
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_two_momentum_steps(self):
        with precision(np.float64):
            p = Tensor([1.0], requires_grad=True)
        opt = SGD({"p": p}, lr=0.1, momentum=0.9)
        g1, g2 = 0.5, -0.25
        p.grad = np.array([g1])
        opt.step()
        p.grad = np.array([g2])
        opt.step()
        v1 = g1
        v2 = 0.9 * v1 + g2
        assert p.data[0] == pytest.approx(1.0 - 0.1 * v1 - 0.1 * v2, abs=1e-12)

    def test_weight_decay_only_on_named(self):
        with precision(np.float64):
            w, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
        w.grad, b.grad = np.zeros(1), np.zeros(1)
        sgd_step({"w": w, "b": b}, lr=0.1, momentum=0.0, weight_decay=0.5, velocity={}, decay_names={"w"})
        assert w.data[0] == pytest.approx(0.95)
        assert b.data[0] == 1.0

    def test_gradients_left_untouched(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        sgd_step({"p": p}, 0.1, 0.9, 0.0, {})
        assert p.grad.tolist() == [1.0]


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(123), Rng(123)
        np.testing.assert_array_equal(a.uniform(0, 1, 5), b.uniform(0, 1, 5))
        np.testing.assert_array_equal(a.normal((3,)), b.normal((3,)))

    def test_counter_state_resumes(self):
        a = Rng(7)
        a.uniform(0, 1, 3)
        resumed = Rng(*a.state())
        np.testing.assert_array_equal(a.permutation(10), resumed.permutation(10))

    def test_known_values(self):
        # frozen from the first run; guards against silent changes to the stream
        assert Rng(0).permutation(6).tolist() == FROZEN_PERMUTATION

    def test_children_differ(self):
        root = Rng(1)
        assert root.child(1).uniform(0, 1, 4).tolist() != root.child(2).uniform(0, 1, 4).tolist()

    def test_seed_range(self):
        with pytest.raises(ContractError):
            Rng(-1)


FROZEN_PERMUTATION = [0, 5, 1, 2, 4, 3]


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_gradient_check(name, seed):
    assert op_error(name, seed) < 1e-4


def test_forward_is_bit_identical():
    g = np.random.default_rng(0)
    x, w, b = g.normal(size=(2, 3, 6, 6)), g.normal(size=(4, 3, 3, 3)), g.normal(size=4)
    first = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    second = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert first.tobytes() == second.tobytes()
