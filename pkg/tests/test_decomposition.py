"""Field storage, queries, and structural edits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfield.decomposition import (
    DecomposedField,
    RankLayout,
    concat_ranks,
    permute_ranks,
    query_features,
    reconstruct_dense,
    truncate,
    upsample,
)


def random_field(seed=0, channels=4, resolution=(8, 8, 8), n_vec=3, n_mat=2,
                 groups=None, dtype=np.float32):
    rng = np.random.default_rng(seed)
    layout = RankLayout(n_vec, n_mat, groups or ((n_vec, n_mat),))
    return DecomposedField.random(channels, resolution, layout, rng,
                                  factor_scale=0.5, weight_scale=0.5, dtype=dtype)


def reference_query(field, u):
    """Straight-from-definition evaluation: sample each factor by linear or
    bilinear interpolation at the point, multiply per rank, apply S. Plain
    loops, no shared code with the library path."""

    def lerp1(vec, g):
        i = min(int(np.floor(g)), len(vec) - 2)
        f = g - i
        return (1 - f) * vec[i] + f * vec[i + 1]

    def lerp2(mat, ga, gb):
        ia = min(int(np.floor(ga)), mat.shape[0] - 2)
        ib = min(int(np.floor(gb)), mat.shape[1] - 2)
        fa, fb = ga - ia, gb - ib
        return (
            (1 - fa) * (1 - fb) * mat[ia, ib]
            + (1 - fa) * fb * mat[ia, ib + 1]
            + fa * (1 - fb) * mat[ia + 1, ib]
            + fa * fb * mat[ia + 1, ib + 1]
        )

    H, W, D = field.resolution
    gx, gy, gz = u[0] * (H - 1), u[1] * (W - 1), u[2] * (D - 1)
    out = np.zeros(field.channels)
    for r in range(field.layout.n_vec):
        z = (
            lerp1(field.Ux[:, r], gx)
            * lerp1(field.Uy[:, r], gy)
            * lerp1(field.Uz[:, r], gz)
        )
        out += field.S[:, r].astype(np.float64) * z
    for r in range(field.layout.n_mat):
        z = (
            lerp2(field.Uxy[:, :, r], gx, gy)
            * lerp2(field.Uyz[:, :, r], gy, gz)
            * lerp2(field.Uxz[:, :, r], gx, gz)
        )
        out += field.S[:, field.layout.n_vec + r].astype(np.float64) * z
    return out


class TestRankLayout:
    def test_group_sums_validated(self):
        with pytest.raises(ValueError):
            RankLayout(3, 2, ((2, 2),))
        with pytest.raises(ValueError):
            RankLayout(2, 1, ((2, 1), (0, 0)))

    def test_prefixes(self):
        layout = RankLayout(16, 8, ((16, 0), (0, 1), (0, 1), (0, 2), (0, 4)))
        assert list(layout.vec_prefixes()) == [16, 16, 16, 16, 16]
        assert list(layout.mat_prefixes()) == [0, 1, 2, 4, 8]
        assert layout.prefix(2) == (16, 1)


class TestQueryFeatures:
    def test_zero_field_everywhere(self):
        field = DecomposedField.zeros(4, (6, 5, 7), RankLayout.single_group(2, 2))
        u = np.random.default_rng(0).random((50, 3))
        assert np.all(query_features(field, u) == 0.0)

    def test_rank_one_constant_field(self):
        layout = RankLayout.single_group(1, 0)
        w = np.array([[0.3], [-1.2], [2.0]], dtype=np.float32)
        field = DecomposedField(
            3, (4, 4, 4), w,
            np.ones((4, 1), np.float32), np.ones((4, 1), np.float32),
            np.ones((4, 1), np.float32),
            np.zeros((4, 4, 0), np.float32), np.zeros((4, 4, 0), np.float32),
            np.zeros((4, 4, 0), np.float32),
            layout,
        )
        u = np.random.default_rng(1).random((40, 3))
        out = query_features(field, u)
        np.testing.assert_allclose(out, np.tile(w[:, 0], (40, 1)), atol=1e-7)

    def test_matches_reference_interpolate_then_multiply(self):
        field = random_field(seed=3)
        rng = np.random.default_rng(4)
        u = rng.random((100, 3))
        got = query_features(field, u)
        want = np.stack([reference_query(field, p) for p in u])
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_keep_prefix_matches_manual_slice(self):
        field = random_field(seed=5)
        u = np.random.default_rng(6).random((20, 3))
        got = query_features(field, u, keep=(2, 1))
        sliced = truncate(field, (2, 1))
        np.testing.assert_allclose(got, query_features(sliced, u), atol=1e-6)

    def test_keep_beyond_layout_rejected(self):
        field = random_field()
        with pytest.raises(ValueError):
            query_features(field, np.array([0.5, 0.5, 0.5]), keep=(4, 2))


class TestReconstructDense:
    def test_zero_field(self):
        field = DecomposedField.zeros(2, (4, 4, 4), RankLayout.single_group(1, 1))
        assert np.all(reconstruct_dense(field) == 0)

    def test_basis_vectors_give_one_hot(self):
        layout = RankLayout.single_group(1, 0)
        e = lambda n, i: np.eye(n, dtype=np.float32)[:, [i]]
        field = DecomposedField(
            1, (5, 6, 7), np.array([[1.0]], np.float32),
            e(5, 2), e(6, 3), e(7, 4),
            np.zeros((5, 6, 0), np.float32), np.zeros((6, 7, 0), np.float32),
            np.zeros((5, 7, 0), np.float32),
            layout,
        )
        dense = reconstruct_dense(field)
        expect = np.zeros((1, 5, 6, 7))
        expect[0, 2, 3, 4] = 1.0
        np.testing.assert_array_equal(dense, expect)

    def test_query_at_nodes_equals_dense(self):
        field = random_field(seed=7, resolution=(5, 6, 4))
        dense = reconstruct_dense(field)
        H, W, D = field.resolution
        rng = np.random.default_rng(8)
        for _ in range(60):
            i, j, k = rng.integers(0, H), rng.integers(0, W), rng.integers(0, D)
            u = np.array([i / (H - 1), j / (W - 1), k / (D - 1)])
            np.testing.assert_allclose(
                query_features(field, u), dense[:, i, j, k], atol=1e-6
            )

    def test_size_guard(self):
        field = DecomposedField.zeros(48, (80, 80, 80), RankLayout.single_group(1, 0))
        with pytest.raises(ValueError):
            reconstruct_dense(field)


class TestTruncate:
    def test_keep_all_identity(self):
        field = random_field(seed=9)
        out = truncate(field, (3, 2))
        u = np.random.default_rng(10).random((30, 3))
        np.testing.assert_array_equal(query_features(field, u), query_features(out, u))

    def test_zero_tail_ranks_change_nothing(self):
        field = random_field(seed=11)
        field.S[:, 2] = 0.0  # third vec component
        field.S[:, 4] = 0.0  # second mat component
        out = truncate(field, (2, 1))
        u = np.random.default_rng(12).random((30, 3))
        np.testing.assert_allclose(
            query_features(field, u), query_features(out, u), atol=1e-6
        )

    def test_empty_keep_rejected(self):
        with pytest.raises(ValueError):
            truncate(random_field(), ([], []))

    def test_importance_choice_near_optimal_on_tiny_grid(self):
        # brute force: every same-size subset of ranks on a 4^3 grid
        from itertools import combinations

        from ccfield.compression import rank_importance

        rng = np.random.default_rng(13)
        layout = RankLayout.single_group(5, 0)
        field = DecomposedField.random(2, (4, 4, 4), layout, rng,
                                       factor_scale=0.8, weight_scale=0.8)
        # spread the component magnitudes so importance ordering is meaningful
        for r in range(5):
            field.S[:, r] *= 0.55 ** r
        dense = reconstruct_dense(field).astype(np.float64)

        def subset_mse(vec_idx):
            kept = truncate(field, (list(vec_idx), []))
            return float(np.mean((reconstruct_dense(kept).astype(np.float64) - dense) ** 2))

        k = 3
        best = min(subset_mse(c) for c in combinations(range(5), k))
        imp = rank_importance(field)
        chosen = list(np.argsort(-imp.vec_scores)[:k])
        assert subset_mse(chosen) <= best * 1.05 + 1e-12


class TestConcatRanks:
    def test_concat_zero_field_is_identity(self):
        a = random_field(seed=14)
        z = DecomposedField.zeros(4, (8, 8, 8), RankLayout.single_group(1, 1))
        u = np.random.default_rng(15).random((25, 3))
        np.testing.assert_allclose(
            query_features(concat_ranks(a, z), u), query_features(a, u), atol=1e-6
        )

    def test_commutes_up_to_rounding(self):
        a, b = random_field(seed=16), random_field(seed=17)
        u = np.random.default_rng(18).random((50, 3))
        np.testing.assert_allclose(
            query_features(concat_ranks(a, b), u),
            query_features(concat_ranks(b, a), u),
            atol=1e-6,
        )

    def test_is_pointwise_sum(self):
        a, b = random_field(seed=19), random_field(seed=20)
        u = np.random.default_rng(21).random((100, 3))
        got = query_features(concat_ranks(a, b), u)
        want = query_features(a, u) + query_features(b, u)
        assert np.abs(got - want).max() < 1e-6

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            concat_ranks(random_field(channels=4), random_field(channels=3))


class TestPermuteRanks:
    def test_identity_perm_bitwise(self):
        field = random_field(seed=22)
        out = permute_ranks(field, [0, 1, 2], [0, 1])
        for (_, a), (_, b) in zip(field.params(), out.params()):
            np.testing.assert_array_equal(a, b)

    def test_swap_two_vec_ranks(self):
        field = random_field(seed=23)
        out = permute_ranks(field, [1, 0, 2], [0, 1])
        u = np.random.default_rng(24).random((30, 3))
        np.testing.assert_allclose(
            query_features(field, u), query_features(out, u), atol=1e-6
        )

    def test_random_perm(self):
        field = random_field(seed=25)
        rng = np.random.default_rng(26)
        out = permute_ranks(field, rng.permutation(3), rng.permutation(2))
        u = rng.random((100, 3))
        assert np.abs(query_features(field, u) - query_features(out, u)).max() < 1e-6

    def test_invalid_perm_rejected(self):
        with pytest.raises(ValueError):
            permute_ranks(random_field(), [0, 0, 1], [0, 1])


class TestUpsample:
    def test_constant_stays_constant(self):
        field = random_field(seed=27)
        field.Ux[:] = 1.0
        out = upsample(field, (16, 16, 16))
        np.testing.assert_allclose(out.Ux, 1.0, atol=1e-7)

    def test_linear_ramp_preserved(self):
        field = random_field(seed=28, resolution=(8, 8, 8))
        ramp = np.linspace(0.0, 1.0, 8, dtype=np.float32)
        field.Ux[:, 0] = ramp
        out = upsample(field, (15, 8, 8))
        np.testing.assert_allclose(out.Ux[:, 0], np.linspace(0, 1, 15), atol=1e-6)
        assert out.Ux[0, 0] == 0.0 and abs(out.Ux[-1, 0] - 1.0) < 1e-7

    def test_queries_at_old_nodes_preserved(self):
        # 15 = 2*8 - 1 nests the old grid inside the new one, so node values
        # survive the resampling exactly; a non-nested target like 16 only
        # preserves the corners (the interior is re-interpolated).
        field = random_field(seed=29, resolution=(8, 8, 8))
        out = upsample(field, (15, 15, 15))
        rng = np.random.default_rng(30)
        nodes = rng.integers(0, 8, size=(40, 3))
        u = nodes / 7.0
        np.testing.assert_allclose(
            query_features(field, u), query_features(out, u), atol=1e-5
        )
        out16 = upsample(field, (16, 16, 16))
        corners = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]])
        np.testing.assert_allclose(
            query_features(field, corners), query_features(out16, corners), atol=1e-5
        )

    def test_degenerate_target_rejected(self):
        with pytest.raises(ValueError):
            upsample(random_field(), (1, 8, 8))

    def test_s_unchanged(self):
        field = random_field(seed=31)
        out = upsample(field, (12, 12, 12))
        np.testing.assert_array_equal(field.S, out.S)


class TestInvariants:
    def test_linearity_in_ranks(self):
        field = random_field(seed=32)
        u = np.random.default_rng(33).random((40, 3))
        total = query_features(field, u)
        parts = np.zeros_like(total)
        for r in range(3):
            parts += query_features(truncate(field, ([r], [])), u)
        for r in range(2):
            parts += query_features(truncate(field, ([], [r])), u)
        np.testing.assert_allclose(total, parts, atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.25, 4.0), st.integers(0, 2), st.integers(0, 10 ** 6))
    def test_scale_gauge(self, lam, rank, seed):
        field = random_field(seed=34)
        moved = field.replace_params(
            S=field.S.copy(), Ux=field.Ux.copy()
        )
        moved.S[:, rank] *= lam
        moved.Ux[:, rank] /= lam
        u = np.random.default_rng(seed).random((20, 3))
        np.testing.assert_allclose(
            query_features(field, u), query_features(moved, u), atol=1e-6
        )

    def test_truncation_nesting(self):
        field = random_field(seed=35, n_vec=4, n_mat=0, groups=((2, 0), (2, 0)))
        u = np.random.default_rng(36).random((30, 3))
        lo = query_features(field, u, keep=(2, 0))
        hi = query_features(field, u, keep=(4, 0))
        mid_only = query_features(truncate(field, ([2, 3], [])), u)
        np.testing.assert_allclose(hi - lo, mid_only, atol=1e-6)
