import numpy as np
import pytest

from dronekd.engine import (
    OpGraph,
    Tensor,
    channel_shuffle,
    concat,
    conv2d,
    no_grad,
    split,
)


class TestConv2d:
    def test_ones_3x3_sums_to_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_identity_kernel_preserves_input(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 1, 5, 5)).astype(np.float32))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(k), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_output_shape_arithmetic(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((2, 4, 8, 8)).astype(np.float32))
        k = Tensor(rng.random((6, 4, 3, 3)).astype(np.float32))
        assert conv2d(x, k).shape == (2, 6, 6, 6)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        k = Tensor(np.zeros((2, 5, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 5, 3, 3\)"):
            conv2d(x, k)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.random((2, 3, 9, 9)).astype(np.float32)
        k = rng.random((4, 3, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        b = conv2d(Tensor(x.copy()), Tensor(k.copy()), stride=2, padding=1).data
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * x).backward()

    def test_gradients_accumulate_until_zeroed(self):
        x = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        (x * x).sum().backward()
        first = x.grad.copy()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * first)
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_visits_node_once(self):
        # y = x + x: gradient must be exactly 2, not 1 or 4.
        x = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
        (x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0])


class TestShapeOps:
    @pytest.mark.parametrize("sizes", [[1, 5], [2, 2, 2], [6]])
    def test_concat_split_roundtrip_bit_exact(self, sizes):
        rng = np.random.default_rng(11)
        x = Tensor(rng.random((3, sum(sizes), 2)).astype(np.float32))
        parts = split(x, sizes, axis=1)
        back = concat(parts, axis=1)
        np.testing.assert_array_equal(back.data, x.data)

    def test_split_sizes_must_cover_axis(self):
        x = Tensor(np.zeros((2, 5), dtype=np.float32))
        with pytest.raises(ValueError, match="split sizes"):
            split(x, [2, 2], axis=1)

    def test_channel_shuffle_requires_divisible_channels(self):
        x = Tensor(np.zeros((1, 5, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible"):
            channel_shuffle(x, 2)


class TestGraph:
    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert y._parents == ()

    def test_opgraph_trace_orders_and_collects_parameters(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        loss = ((x * y) + x).sum()
        graph = OpGraph.trace(loss)
        names = graph.op_names()
        assert names.index("mul") < names.index("add") < names.index("sum")
        assert len(graph.parameters) == 2

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(2)
        from dronekd.engine import exp, log_softmax, sigmoid, softmax, softplus

        x = Tensor(rng.standard_normal((4, 7)).astype(np.float32) * 50)
        for fn in (sigmoid, softplus, softmax, log_softmax):
            assert np.all(np.isfinite(fn(x).data)), fn
        assert np.all(np.isfinite(exp(Tensor(np.full(3, 10.0, np.float32))).data))
