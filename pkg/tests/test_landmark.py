"""Scan kernel and landmark layer tests, all anchored to the brute-force
membership oracles in convnets."""

import numpy as np
import pytest

from landmarkconv import landmark, tensor as T
from landmarkconv.convnets import (naive_lfc_oracle, region_max_map_oracle,
                                   region_max_oracle)
from landmarkconv.landmark import (DmpDirection, LfcLayer, PartitionScheme,
                                   decode_landmarks, dmp_backward, dmp_scan,
                                   dmp_scan_parallel, lfc_forward, scan_max,
                                   splat_heatmap)
from landmarkconv.tensor import ContractError, DimensionError, Tensor

ALL_SCHEMES = [PartitionScheme(k) for k in ("p1", "p2v", "p2h", "p4")]


def all_directions():
    out = []
    for scheme in ALL_SCHEMES:
        for g, d in enumerate(scheme.directions):
            out.append((scheme, g, d))
    return out


class TestPartitionScheme:
    def test_group_counts(self):
        assert [s.group_count for s in ALL_SCHEMES] == [1, 2, 2, 4]

    def test_groups_cover_map_and_include_node(self):
        rng = np.random.default_rng(0)
        for scheme in ALL_SCHEMES:
            for _ in range(20):
                h, w = rng.integers(1, 9, 2)
                i, j = rng.integers(0, h), rng.integers(0, w)
                union = np.zeros((h, w), dtype=bool)
                for g in range(scheme.group_count):
                    mask = scheme.group_mask(g, (i, j), h, w)
                    assert mask[i, j], "node must belong to every group"
                    union |= mask
                assert union.all(), "groups must cover the whole map"

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ContractError):
            PartitionScheme("p8")


class TestDmpScan:
    def test_monotone_map_is_fixed_point(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        h, _, _ = scan_max(x, DmpDirection(1, 1))
        np.testing.assert_array_equal(h, x)

    def test_dominant_origin(self):
        x = np.array([[[4.0, 3.0], [2.0, 1.0]]], dtype=np.float32)
        h, sr, sc = scan_max(x, DmpDirection(1, 1))
        np.testing.assert_array_equal(h, np.full((1, 2, 2), 4.0))
        assert sr.max() == 0 and sc.max() == 0

    @pytest.mark.parametrize("scheme,group,direction", all_directions())
    def test_matches_membership_oracle_exactly(self, scheme, group, direction):
        rng = np.random.default_rng(hash((scheme.kind, group)) % 2**32)
        for _ in range(6):
            c = int(rng.integers(1, 5))
            hgt, wid = rng.integers(1, 9, 2)
            x = rng.standard_normal((c, hgt, wid)).astype(np.float32)
            got, _, _ = scan_max(x, direction)
            ref = region_max_map_oracle(x, scheme, group)
            np.testing.assert_array_equal(got, ref)

    def test_argmax_is_a_maximizer_inside_the_region(self):
        rng = np.random.default_rng(3)
        for scheme, g, d in all_directions():
            x = rng.integers(0, 4, (2, 6, 6)).astype(np.float32)  # forces ties
            h, sr, sc = scan_max(x, d)
            for i in range(6):
                for j in range(6):
                    mask = scheme.group_mask(g, (i, j), 6, 6)
                    for ch in range(2):
                        r, c = sr[ch, i, j], sc[ch, i, j]
                        assert mask[r, c]
                        assert x[ch, r, c] == h[ch, i, j]

    def test_tie_break_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.integers(0, 3, (3, 7, 7)).astype(np.float32)
        for _, _, d in all_directions():
            h1, r1, c1 = scan_max(x, d)
            h2, r2, c2 = scan_max(x.copy(), d)
            np.testing.assert_array_equal(r1, r2)
            np.testing.assert_array_equal(c1, c2)

    def test_quadrant_tie_break_is_scan_order_first(self):
        # two equal maxima; the (+1,+1) scan processes rows ascending,
        # columns ascending, so (0,1) precedes (1,0)
        x = np.array([[[1.0, 2.0], [2.0, 0.0]]], dtype=np.float32)
        _, sr, sc = scan_max(x, DmpDirection(1, 1))
        assert (sr[0, 1, 1], sc[0, 1, 1]) == (0, 1)

    def test_flip_symmetry_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.standard_normal((2, 5, 8)).astype(np.float32)
            a, _, _ = scan_max(x[..., ::-1], DmpDirection(1, 1))
            b, _, _ = scan_max(x, DmpDirection(1, -1))
            np.testing.assert_array_equal(a, b[..., ::-1])
            a, _, _ = scan_max(x[..., ::-1, :], DmpDirection(1, 1))
            b, _, _ = scan_max(x, DmpDirection(-1, 1))
            np.testing.assert_array_equal(a, b[..., ::-1, :])

    def test_idempotence(self):
        rng = np.random.default_rng(6)
        for _, _, d in all_directions():
            x = rng.standard_normal((2, 6, 6)).astype(np.float32)
            h1, _, _ = scan_max(x, d)
            h2, _, _ = scan_max(h1, d)
            np.testing.assert_array_equal(h1, h2)

    def test_monotonicity(self):
        rng = np.random.default_rng(7)
        for _, _, d in all_directions():
            x = rng.standard_normal((2, 6, 6)).astype(np.float32)
            bump = np.abs(rng.standard_normal((2, 6, 6))).astype(np.float32)
            h1, _, _ = scan_max(x, d)
            h2, _, _ = scan_max(x + bump, d)
            assert (h2 >= h1).all()

    def test_empty_map_rejected(self):
        with pytest.raises(DimensionError):
            scan_max(np.zeros((1, 0, 3), dtype=np.float32), DmpDirection(1, 1))

    def test_visit_counter(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 5, 6)).astype(np.float32)
        for scheme, passes in zip(ALL_SCHEMES, (1, 1, 1, 2)):
            landmark.reset_scan_counters()
            for d in scheme.directions:
                scan_max(x, d)
            assert landmark.scan_cell_visits == passes * scheme.group_count * x.size
            assert landmark.scan_aux_ops <= scheme.group_count * 4 * (5 + 6)

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((8, 7, 7)).astype(np.float32)
        for _, _, d in all_directions():
            h1, r1, c1 = scan_max(x, d)
            h2, r2, c2 = dmp_scan_parallel(x, d, workers=3)
            np.testing.assert_array_equal(h1, h2)
            np.testing.assert_array_equal(r1, r2)
            np.testing.assert_array_equal(c1, c2)


class TestDmpBackward:
    def test_all_routes_to_origin(self):
        x = Tensor(np.array([[[4.0, 3.0], [2.0, 1.0]]], dtype=np.float32))
        _, argmax = dmp_scan(x, DmpDirection(1, 1))
        grad = dmp_backward(np.ones((1, 2, 2), dtype=np.float32), argmax)
        np.testing.assert_array_equal(grad, [[[4.0, 0.0], [0.0, 0.0]]])

    def test_one_hot_routing(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((1, 4, 4)).astype(np.float32)
        _, (sr, sc) = dmp_scan(Tensor(x), DmpDirection(1, 1))
        g = np.zeros((1, 4, 4), dtype=np.float32)
        g[0, 2, 3] = 1.0
        back = dmp_backward(g, (sr, sc))
        assert back.sum() == 1.0
        assert back[0, sr[0, 2, 3], sc[0, 2, 3]] == 1.0

    def test_gradient_conservation_exact(self):
        rng = np.random.default_rng(11)
        for _, _, d in all_directions():
            for _ in range(8):
                c, h, w = rng.integers(1, 6, 3)
                x = rng.standard_normal((c, h, w)).astype(np.float32)
                _, sr, sc = scan_max(x, d)
                g = rng.integers(-8, 9, (c, h, w)).astype(np.float32)
                back = dmp_backward(g, (sr, sc))
                assert float(back.sum()) == float(g.sum())

    def test_shape_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 3), dtype=np.float32))
        _, argmax = dmp_scan(x, DmpDirection(1, 1))
        with pytest.raises(DimensionError):
            dmp_backward(np.ones((1, 2, 2), dtype=np.float32), argmax)

    def test_tape_gradient_matches_finite_diff(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)

        def f(t):
            h, _ = dmp_scan(t, DmpDirection(-1, 1))
            return T.sum_all(T.mul(h, h))

        assert T.finite_diff_check(f, x, eps=1e-5) < 1e-4


class TestLfcLayer:
    def test_global_identity_constant_map(self):
        layer = LfcLayer("p1", 2, 2, 2, residual=False)
        layer.embed_w[0].data = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
        layer.agg_w.data = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
        x = Tensor(np.full((2, 4, 4), -1.5, dtype=np.float32))
        y = lfc_forward(layer, x).data
        np.testing.assert_array_equal(y, np.zeros((2, 4, 4)))  # relu(-1.5) = 0
        x2 = Tensor(np.full((2, 4, 4), 2.5, dtype=np.float32))
        np.testing.assert_allclose(lfc_forward(layer, x2).data,
                                   np.full((2, 4, 4), 2.5), rtol=1e-6)

    @pytest.mark.parametrize("kind", ["p1", "p2v", "p2h", "p4"])
    def test_matches_naive_membership_evaluation(self, kind):
        rng = np.random.default_rng(13)
        layer = LfcLayer(kind, 3, 4, 3, rng=rng)
        x = rng.standard_normal((3, 7, 6)).astype(np.float32)
        got = lfc_forward(layer, Tensor(x)).data
        ref = naive_lfc_oracle(layer, x)
        np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6)

    def test_halves_v_output_is_row_invariant(self):
        rng = np.random.default_rng(14)
        layer = LfcLayer("p2v", 3, 4, 3, rng=rng)
        col = rng.standard_normal((3, 1, 6)).astype(np.float32)
        x = np.repeat(col, 5, axis=1)  # identical rows
        y = lfc_forward(layer, Tensor(x)).data
        for i in range(1, 5):
            np.testing.assert_array_equal(y[:, i, :], y[:, 0, :])

    def test_channel_mismatch(self):
        layer = LfcLayer("p4", 3, 2, 3)
        with pytest.raises(DimensionError):
            lfc_forward(layer, Tensor(np.zeros((4, 5, 5), dtype=np.float32)))

    def test_residual_only_when_channels_match(self):
        assert LfcLayer("p4", 3, 2, 3, residual=True).residual
        assert not LfcLayer("p4", 3, 2, 4, residual=True).residual

    def test_embed_weights_are_distinct_parameters(self):
        layer = LfcLayer("p4", 3, 2, 3)
        ids = {id(w) for w in layer.embed_w}
        assert len(ids) == 4

    def test_batched_matches_single(self):
        rng = np.random.default_rng(15)
        layer = LfcLayer("p4", 3, 2, 3, rng=rng)
        x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
        batched = lfc_forward(layer, Tensor(x)).data
        for n in range(4):
            single = lfc_forward(layer, Tensor(x[n])).data
            np.testing.assert_array_equal(batched[n], single)


class TestDecodeLandmarks:
    def test_global_unique_max(self):
        rng = np.random.default_rng(16)
        layer = LfcLayer("p1", 2, 3, 2, rng=rng)
        x = rng.standard_normal((2, 5, 5)).astype(np.float32)
        lfc_forward(layer, Tensor(x), store_argmax=True)
        e = np.maximum(
            np.einsum("mc,chw->mhw", layer.embed_w[0].data[:, :, 0, 0], x), 0)
        marks = decode_landmarks(layer, (2, 2))
        assert len(marks) == 3  # k * c_mid = 1 * 3
        for g, ch, r, c in marks:
            flat = e[ch].argmax()
            assert (r, c) == (flat // 5, flat % 5)

    def test_membership_respected_on_quadrants(self):
        rng = np.random.default_rng(17)
        layer = LfcLayer("p4", 2, 2, 2, rng=rng)
        x = rng.standard_normal((2, 6, 6)).astype(np.float32)
        lfc_forward(layer, Tensor(x), store_argmax=True)
        node = (2, 4)
        marks = decode_landmarks(layer, node)
        assert len(marks) == 8
        for g, ch, r, c in marks:
            assert layer.scheme.group_mask(g, node, 6, 6)[r, c]

    def test_store_disabled_raises(self):
        layer = LfcLayer("p4", 2, 2, 2)
        lfc_forward(layer, Tensor(np.zeros((2, 4, 4), dtype=np.float32)))
        with pytest.raises(ContractError):
            decode_landmarks(layer, (0, 0))

    def test_one_hot_channel_lands_on_hot_pixel(self):
        layer = LfcLayer("p1", 1, 1, 1, rng=np.random.default_rng(18))
        layer.embed_w[0].data = np.ones((1, 1, 1, 1), dtype=np.float32)
        x = np.zeros((1, 6, 6), dtype=np.float32)
        x[0, 4, 1] = 5.0
        lfc_forward(layer, Tensor(x), store_argmax=True)
        ((_, _, r, c),) = decode_landmarks(layer, (0, 0))
        assert (r, c) == (4, 1)

    def test_batched_store_rejected(self):
        layer = LfcLayer("p4", 2, 2, 2)
        with pytest.raises(ContractError):
            lfc_forward(layer, Tensor(np.zeros((2, 2, 4, 4), dtype=np.float32)),
                        store_argmax=True)


class TestSplatHeatmap:
    def test_peak_at_landmark_cell_center(self):
        # stride 1 puts the cell center exactly on a pixel center
        heat = splat_heatmap([(0, 0, 9, 13)], 32, 32, stride=1).data
        flat = heat.argmax()
        assert (flat // 32, flat % 32) == (9, 13)
        assert heat.max() == pytest.approx(1.0)

    def test_duplicate_landmarks_do_not_move_peak(self):
        one = splat_heatmap([(0, 0, 1, 1)], 16, 16, stride=4).data
        two = splat_heatmap([(0, 0, 1, 1), (0, 1, 1, 1)], 16, 16, stride=4).data
        np.testing.assert_allclose(one, two, atol=1e-7)

    def test_falloff_at_one_sigma(self):
        stride = 8
        heat = splat_heatmap([(0, 0, 1, 1)], 64, 64, stride=stride,
                             sigma_cells=0.5).data
        cy = cx = int(1.5 * stride)  # cell center at 12 px
        sigma = int(0.5 * stride)
        ratio = heat[cy, cx + sigma] / heat[cy, cx]
        # pixel centers sit half a pixel off the analytic point
        target_hi = np.exp(-0.5 * (sigma - 0.0) ** 2 / sigma ** 2)
        assert abs(ratio - target_hi) < 0.02

    def test_empty_list_gives_zero_map(self):
        heat = splat_heatmap([], 16, 16, stride=4).data
        np.testing.assert_array_equal(heat, np.zeros((16, 16)))

    def test_bad_sigma(self):
        with pytest.raises(ContractError):
            splat_heatmap([(0, 0, 1, 1)], 8, 8, stride=1, sigma_cells=0.0)
