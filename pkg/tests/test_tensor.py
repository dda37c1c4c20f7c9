"""Tensor engine tests: forward semantics against naive oracles, tape
gradients against central finite differences, optimizer behavior, and the
checkpoint container."""

import os

import numpy as np
import pytest

from landmarkconv import checkpoint
from landmarkconv import tensor as T
from landmarkconv.convnets import naive_conv2d
from landmarkconv.landmark import LfcLayer
from landmarkconv.tensor import ContractError, DimensionError, Tensor


class TestConv2d:
    def test_identity_kernel(self):
        x = np.ones((1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        y = T.conv2d(Tensor(x), Tensor(w)).data
        np.testing.assert_array_equal(y, x)

    def test_dilated_border_taps(self):
        # dilation 2 on a 5x5 ones map: 9 in-bounds taps at the center,
        # 4 at the corner
        x = Tensor(np.ones((1, 5, 5), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        y = T.conv2d(x, w, dilation=2).data
        assert y[0, 2, 2] == 9.0
        assert y[0, 0, 0] == 4.0

    @pytest.mark.parametrize("k,dilation,stride", [(1, 1, 1), (3, 1, 1),
                                                   (3, 2, 1), (3, 3, 1),
                                                   (3, 1, 2)])
    def test_matches_naive_loop(self, k, dilation, stride):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 6, 7))
        w = rng.standard_normal((2, 3, k, k))
        got = T.conv2d(Tensor(x), Tensor(w), dilation=dilation, stride=stride).data
        ref = naive_conv2d(x, w, dilation=dilation, stride=stride)
        np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9)

    def test_integer_inputs_bitwise(self):
        rng = np.random.default_rng(6)
        x = rng.integers(-5, 6, (2, 6, 6)).astype(np.float64)
        w = rng.integers(-3, 4, (3, 2, 3, 3)).astype(np.float64)
        got = T.conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(got, naive_conv2d(x, w))

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
        w = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        batched = T.conv2d(Tensor(x), w).data
        for n in range(4):
            single = T.conv2d(Tensor(x[n]), w).data
            np.testing.assert_array_equal(batched[n], single)

    def test_shape_errors(self):
        x = Tensor(np.ones((3, 4, 4)))
        with pytest.raises(DimensionError):
            T.conv2d(x, Tensor(np.ones((2, 5, 1, 1))))
        with pytest.raises(DimensionError):
            T.conv2d(x, Tensor(np.ones((2, 3, 2, 2))))  # even kernel
        with pytest.raises(DimensionError):
            T.conv2d(x, Tensor(np.ones((2, 3, 3, 3))), dilation=0)


class TestElementwise:
    def test_relu(self):
        y = T.relu(Tensor([-1.0, 0.0, 2.0])).data
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == 0.5

    def test_affine_broadcast(self):
        # gamma=2 on a map of ones, plus beta=1, gives a map of threes
        ones = Tensor(np.ones((4, 3, 3), dtype=np.float32))
        out = T.add(T.mul(Tensor(np.full((4, 1, 1), 2.0, np.float32)), ones),
                    Tensor(np.ones((4, 1, 1), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.full((4, 3, 3), 3.0))

    def test_exp(self):
        np.testing.assert_allclose(T.exp(Tensor([0.0, 1.0])).data,
                                   [1.0, np.e], rtol=1e-6)

    def test_broadcast_mismatch_raises(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(8)
        b = rng.standard_normal((4, 3))
        got = T.matmul(Tensor(np.eye(4)), Tensor(b)).data
        np.testing.assert_allclose(got, b, rtol=1e-7)

    def test_small_product(self):
        got = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data
        np.testing.assert_array_equal(got, [[11.0]])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        ref = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, ref, rtol=1e-6)

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestResampling:
    def test_upsample_constant(self):
        x = Tensor(np.full((2, 3, 3), 1.5, dtype=np.float32))
        y = T.bilinear_upsample(x, 9, 9).data
        np.testing.assert_array_equal(y, np.full((2, 9, 9), 1.5))

    def test_downsample_window_max(self):
        y = T.max_downsample(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 1, 1).data
        np.testing.assert_array_equal(y, [[[4.0]]])

    def test_odd_scale_center_cells_reproduce_source(self):
        # with an odd factor, every third output cell center coincides with
        # a source center; bilinear weights there collapse to identity
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 5))
        y = T.bilinear_upsample(Tensor(x), 12, 15).data
        np.testing.assert_allclose(y[:, 1::3, 1::3], x, rtol=1e-6, atol=1e-12)

    def test_non_integer_factor_raises(self):
        with pytest.raises(DimensionError):
            T.bilinear_upsample(Tensor(np.ones((1, 3, 3))), 7, 9)
        with pytest.raises(DimensionError):
            T.max_downsample(Tensor(np.ones((1, 6, 6))), 4, 3)


class TestLosses:
    def test_uniform_ce_is_log_n(self):
        ce = T.softmax_ce(Tensor(np.zeros(4)), 2)
        np.testing.assert_allclose(ce.item(), np.log(4.0), rtol=1e-7)

    def test_perfect_mse_is_zero(self):
        x = np.arange(6.0).reshape(2, 3)
        assert T.mse(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_ce_matches_log_sum_exp(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal(9)
        got = T.softmax_ce(Tensor(logits), 3).item()
        ref = np.log(np.exp(logits).sum()) - logits[3]
        np.testing.assert_allclose(got, ref, rtol=1e-6)

    def test_ce_index_out_of_range(self):
        with pytest.raises(ContractError):
            T.softmax_ce(Tensor(np.zeros(3)), 3)

    def test_ce_rows_matches_single(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((3, 5))
        rows = T.softmax_ce_rows(Tensor(logits), np.array([0, 4, 2])).item()
        singles = [T.softmax_ce(Tensor(logits[i]), t).item()
                   for i, t in enumerate([0, 4, 2])]
        np.testing.assert_allclose(rows, np.mean(singles), rtol=1e-6)


class TestAutograd:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.relu(x))

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
        T.backward(T.sum_all(y))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_composed_graph_finite_diff(self):
        rng = np.random.default_rng(13)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

        def f(x):
            h = T.relu(T.matmul(x, w))
            return T.mean_all(T.mul(h, T.sigmoid(h)))

        x = Tensor(rng.standard_normal((5, 4)) + 0.3, requires_grad=True)
        assert T.finite_diff_check(f, x, eps=1e-5) < 1e-4
        assert T.finite_diff_check(lambda _: f(x), w, eps=1e-5) < 1e-4

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad

    def test_concat_slice_gather_grads(self):
        rng = np.random.default_rng(14)
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)

        def f(t):
            cat = T.concat([t, b], axis=1)
            return T.sum_all(T.mul(T.slice_axis(cat, 1, 1, 4),
                                   T.slice_axis(cat, 1, 1, 4)))

        assert T.finite_diff_check(f, a, eps=1e-5) < 1e-4
        table = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
        idx = np.array([[0, 2], [2, 6]])
        assert T.finite_diff_check(
            lambda t: T.sum_all(T.exp(T.take_rows(t, idx))), table,
            eps=1e-5) < 1e-4


class TestFiniteDiffCheck:
    def test_quadratic_is_machine_exact(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.standard_normal(20), requires_grad=True)
        err = T.finite_diff_check(lambda t: T.sum_all(T.mul(t, t)), x, eps=1e-4)
        assert err < 1e-6

    def test_relu_sum_away_from_kinks(self):
        rng = np.random.default_rng(16)
        data = rng.standard_normal(30)
        data[np.abs(data) < 0.05] = 0.1  # keep the probe off the kink
        x = Tensor(data, requires_grad=True)
        err = T.finite_diff_check(lambda t: T.sum_all(T.relu(t)), x, eps=1e-5)
        assert err < 1e-6

    def test_through_full_lfc_layer(self):
        rng = np.random.default_rng(17)
        layer = LfcLayer("p4", 3, 2, 3, rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
        err = T.finite_diff_check(lambda t: T.sum_all(layer.forward(t)), x,
                                  eps=1e-5)
        assert err < 1e-4


class TestOptim:
    def test_cosine_endpoints(self):
        assert T.cosine_lr(1e-4, 0, 100) == pytest.approx(1e-4)
        assert T.cosine_lr(1e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)
        assert T.cosine_lr(2.0, 50, 100) == pytest.approx(1.0)

    def test_adam_step_direction_converges_to_sign(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        g = np.array([0.5, -2.0, 3.0, -0.01])
        opt = T.Adam([p], lr=1e-3, weight_decay=0.0)
        for _ in range(400):
            p.grad = g.copy()
            before = p.data.copy()
            opt.step()
        delta = p.data - before
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-3)

    def test_adam_functional_wrapper(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = T.Adam([p], lr=0.1)
        p.grad = np.array([1.0, -1.0])
        T.adam_step([p], opt, lr=0.1, weight_decay=0.0, t=1)
        assert p.data[0] < 1.0 < p.data[1]

    def test_weight_decay_pulls_toward_zero(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        opt = T.Adam([p], lr=0.01, weight_decay=1.0)
        for _ in range(50):
            p.grad = np.zeros(1)
            opt.step()
        assert abs(p.data[0]) < 10.0


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(18)
        entries = {
            "backbone.conv1.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
            "head.agg.w": rng.standard_normal((2, 8, 1, 1)).astype(np.float32),
            "embed.table": rng.standard_normal((13, 8)).astype(np.float32),
        }
        path = os.path.join(tmp_path, "m.ckpt")
        checkpoint.save(entries, path)
        back = checkpoint.load(path)
        assert list(back) == list(entries)
        for k in entries:
            assert back[k].tobytes() == entries[k].tobytes()

    def test_magic_and_truncation_errors(self, tmp_path):
        bad = os.path.join(tmp_path, "bad.ckpt")
        with open(bad, "wb") as fh:
            fh.write(b"NOPE")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(bad)

    def test_header_layout(self, tmp_path):
        path = os.path.join(tmp_path, "h.ckpt")
        checkpoint.save({"ab": np.zeros((2, 3), dtype=np.float32)}, path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"LBYL"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 1  # count
        assert int.from_bytes(raw[12:16], "little") == 2  # name length
        assert raw[16:18] == b"ab"
        assert int.from_bytes(raw[18:22], "little") == 2  # rank
        dims = (int.from_bytes(raw[22:26], "little"),
                int.from_bytes(raw[26:30], "little"))
        assert dims == (2, 3)
        assert len(raw) == 30 + 24


class TestNanPolicy:
    def test_non_finite_forward_raises_when_enabled(self):
        T.set_nan_checks(True)
        try:
            with pytest.raises(ContractError):
                T.exp(Tensor(np.array([1e30], dtype=np.float32)))
        finally:
            T.set_nan_checks(False)
