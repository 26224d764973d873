import numpy as np
import pytest

from conftest import rel_err
from slicesolver import attention as at
from slicesolver import counters
from slicesolver.attention import (HeadParams, SliceAccumulator, deslice_fast,
                                   deslice_original, multihead_physattn,
                                   physattn_tiled, slice_fast, slice_original,
                                   states_attention, tile_ranges,
                                   validate_slice_weights)
from slicesolver.errors import DegenerateSliceError, ShapeError
from slicesolver.linalg import make_rng, softmax_rows


def head(c_h, m, seed=0, bias=True):
    return HeadParams.init(c_h, m, make_rng(seed), bias=bias)


def slice_oracle(x, p):
    """Per-element double-loop evaluation of the slice definition:
    x_proj = Linear1(x); w = softmax(Linear2(x)); s_j = sum_i w_ij x_proj_i / d_j."""
    n, c_h = x.shape
    m = p.slices
    x_proj = x @ p.w1.data + (p.b1.data if p.b1 is not None else 0.0)
    w = softmax_rows(x @ p.w2.data + (p.b2.data if p.b2 is not None else 0.0))
    s = np.zeros((m, c_h))
    for j in range(m):
        d_j = 0.0
        for i in range(n):
            d_j += w[i, j]
        for k in range(c_h):
            acc = 0.0
            for i in range(n):
                acc += w[i, j] * x_proj[i, k]
            s[j, k] = acc / d_j
    return s, w


def deslice_oracle(s_prime, w, p):
    """Double-loop x_out = Linear3(w s')."""
    n, m = w.shape
    c_h = s_prime.shape[1]
    mix = np.zeros((n, c_h))
    for i in range(n):
        for k in range(c_h):
            for j in range(m):
                mix[i, k] += w[i, j] * s_prime[j, k]
    return mix @ p.w3.data + (p.b3.data if p.b3 is not None else 0.0)


def attention_oracle(s, p):
    """Explicit enumeration of softmax(QK^T/sqrt(C))V followed by o."""
    m, c_h = s.shape
    q, k, v = s @ p.wq.data, s @ p.wk.data, s @ p.wv.data
    out = np.zeros((m, c_h))
    for i in range(m):
        logits = np.array([float(q[i] @ k[j]) / np.sqrt(c_h) for j in range(m)])
        a = np.exp(logits - logits.max())
        a /= a.sum()
        for j in range(m):
            out[i] += a[j] * v[j]
    return out @ p.wo.data


class TestSliceOriginal:
    def test_single_slice_is_column_mean(self):
        p = head(6, 1, seed=1)
        x = make_rng(2).standard_normal((40, 6))
        s, w = slice_original(x, p)
        x_proj = x @ p.w1.data + p.b1.data
        assert np.allclose(s[0], x_proj.mean(axis=0), atol=1e-12)
        assert np.array_equal(w, np.ones((40, 1)))

    def test_one_cell_mesh(self):
        p = head(5, 3, seed=2)
        x = make_rng(3).standard_normal((1, 5))
        s, w = slice_original(x, p)
        x_proj = (x @ p.w1.data + p.b1.data)[0]
        for j in range(3):
            assert np.allclose(s[j], x_proj, atol=1e-12)

    def test_matches_double_loop_oracle(self):
        p = head(8, 4, seed=3)
        x = make_rng(4).standard_normal((64, 8))
        s, w = slice_original(x, p)
        s_ref, w_ref = slice_oracle(x, p)
        assert np.abs(s - s_ref).max() <= 1e-12
        assert np.abs(w - w_ref).max() <= 1e-12


class TestSliceFast:
    def test_equals_original_without_bias(self):
        p = head(32, 16, seed=5, bias=False)
        x = make_rng(6).standard_normal((4096, 32))
        s_f, _ = slice_fast(x, p)
        s_o, _ = slice_original(x, p)
        assert rel_err(s_f, s_o) <= 1e-12

    def test_equals_original_with_bias(self):
        # Normalization before Linear1 keeps the bias path exact.
        p = head(32, 16, seed=7)
        x = make_rng(8).standard_normal((4096, 32))
        s_f, _ = slice_fast(x, p)
        s_o, _ = slice_original(x, p)
        assert rel_err(s_f, s_o) <= 1e-12

    def test_single_slice_column_mean(self):
        p = head(6, 1, seed=9)
        x = make_rng(10).standard_normal((25, 6))
        s_f, _ = slice_fast(x, p)
        s_o, _ = slice_original(x, p)
        assert np.allclose(s_f, s_o, atol=1e-13)


class TestDeslice:
    def test_one_hot_rows_select_states(self):
        p = head(4, 3, seed=11)
        s_prime = make_rng(12).standard_normal((3, 4))
        w = np.zeros((6, 3))
        assign = [0, 2, 1, 1, 0, 2]
        for i, j in enumerate(assign):
            w[i, j] = 1.0
        out = deslice_original(s_prime, w, p)
        lin3 = s_prime @ p.w3.data + p.b3.data
        for i, j in enumerate(assign):
            assert np.allclose(out[i], lin3[j], atol=1e-14)

    def test_scalar_case(self):
        p = head(2, 1, seed=13)
        s_prime = make_rng(14).standard_normal((1, 2))
        out = deslice_original(s_prime, np.ones((1, 1)), p)
        assert np.allclose(out, s_prime @ p.w3.data + p.b3.data, atol=1e-15)

    def test_matches_double_loop_oracle(self):
        p = head(5, 4, seed=15)
        rng = make_rng(16)
        s_prime = rng.standard_normal((4, 5))
        w = softmax_rows(rng.standard_normal((9, 4)))
        assert np.abs(deslice_original(s_prime, w, p) - deslice_oracle(s_prime, w, p)).max() <= 1e-12

    def test_fast_equals_original_with_bias(self):
        # Row-stochastic w passes the Linear3 bias through: w @ 1 = 1.
        p = head(6, 5, seed=17)
        rng = make_rng(18)
        s_prime = rng.standard_normal((5, 6))
        w = softmax_rows(rng.standard_normal((50, 5)))
        assert rel_err(deslice_fast(s_prime, w, p), deslice_original(s_prime, w, p)) <= 1e-12

    def test_uniform_weights_give_identical_rows(self):
        p = head(4, 8, seed=19)
        s_prime = make_rng(20).standard_normal((8, 4))
        w = np.full((12, 8), 1.0 / 8.0)
        out = deslice_fast(s_prime, w, p)
        assert np.abs(out - out[0]).max() <= 1e-12

    def test_zero_states_pass_bias_through(self):
        p = head(4, 3, seed=21)
        w = softmax_rows(make_rng(22).standard_normal((7, 3)))
        out = deslice_fast(np.zeros((3, 4)), w, p)
        assert np.abs(out - p.b3.data).max() <= 1e-12


class TestStatesAttention:
    def test_single_state(self):
        p = head(4, 1, seed=23)
        s = make_rng(24).standard_normal((1, 4))
        out = states_attention(s, p)
        assert np.allclose(out, (s @ p.wv.data) @ p.wo.data, atol=1e-14)

    def test_zero_keys_average_values(self):
        p = head(4, 5, seed=25)
        p.wk.data = np.zeros_like(p.wk.data)
        s = make_rng(26).standard_normal((5, 4))
        out = states_attention(s, p)
        expect = np.tile(((s @ p.wv.data).mean(axis=0) @ p.wo.data), (5, 1))
        assert np.abs(out - expect).max() <= 1e-12

    def test_matches_enumeration_oracle(self):
        p = head(2, 3, seed=27)
        s = make_rng(28).standard_normal((3, 2))
        assert np.abs(states_attention(s, p) - attention_oracle(s, p)).max() <= 1e-12


def full_head(x, p, mode, tile=None):
    return multihead_physattn(x, [p], mode, tile_size=tile)


class TestTiled:
    def test_full_tile_is_bit_identical_to_fast(self):
        p = head(8, 4, seed=29)
        x = make_rng(30).standard_normal((100, 8))
        assert np.array_equal(physattn_tiled(x, p, 100), full_head(x, p, "fast"))

    def test_tile_sizes_agree(self):
        p = head(8, 4, seed=31)
        x = make_rng(32).standard_normal((1000, 8))
        ref = full_head(x, p, "fast")
        for tile in (1000, 250, 125, 7):
            assert rel_err(physattn_tiled(x, p, tile), ref) <= 1e-10

    def test_accumulated_mass_matches_monolithic_column_sums(self):
        p = head(6, 5, seed=33)
        x = make_rng(34).standard_normal((200, 6))
        w = softmax_rows(x @ p.w2.data + p.b2.data)
        acc = SliceAccumulator.empty(5, 6)
        for lo, hi in tile_ranges(200, 37):
            acc.add_tile(w[lo:hi], x[lo:hi])
        assert np.abs(acc.d - w.sum(axis=0)).max() <= 1e-10
        assert acc.tiles_seen == len(tile_ranges(200, 37))

    def test_accumulation_is_order_independent(self):
        p = head(6, 5, seed=35)
        x = make_rng(36).standard_normal((150, 6))
        w = softmax_rows(x @ p.w2.data + p.b2.data)
        ranges = tile_ranges(150, 31)
        fwd = SliceAccumulator.empty(5, 6)
        rev = SliceAccumulator.empty(5, 6)
        for lo, hi in ranges:
            fwd.add_tile(w[lo:hi], x[lo:hi])
        for lo, hi in reversed(ranges):
            rev.add_tile(w[lo:hi], x[lo:hi])
        assert np.abs(fwd.s_raw - rev.s_raw).max() <= 1e-10
        assert np.abs(fwd.d - rev.d).max() <= 1e-10

    def test_bad_tile_size_rejected(self):
        p = head(4, 2, seed=37)
        x = np.zeros((10, 4))
        with pytest.raises(ValueError):
            physattn_tiled(x, p, 0)
        with pytest.raises(ValueError):
            physattn_tiled(x, p, -3)

    def test_parallel_matches_sequential(self):
        p = head(8, 4, seed=38)
        x = make_rng(39).standard_normal((512, 8))
        seq = physattn_tiled(x, p, 64, parallel=False)
        par = physattn_tiled(x, p, 64, parallel=True)
        assert rel_err(par, seq) <= 1e-8

    def test_degenerate_mass_guarded(self):
        acc = SliceAccumulator.empty(3, 2)
        with pytest.raises(DegenerateSliceError):
            acc.states()


class TestMultihead:
    def test_single_head_reduces_to_head_path(self):
        p = head(8, 4, seed=40)
        x = make_rng(41).standard_normal((30, 8))
        s, w = slice_fast(x, p)
        expect = deslice_fast(states_attention(s, p), w, p)
        assert np.allclose(multihead_physattn(x, [p], "fast"), expect, atol=1e-14)

    def test_fast_vs_original_four_heads(self):
        heads = [head(4, 4, seed=42 + i) for i in range(4)]
        x = make_rng(50).standard_normal((128, 16))
        y_o = multihead_physattn(x, heads, "original")
        y_f = multihead_physattn(x, heads, "fast")
        assert rel_err(y_f, y_o) <= 1e-10

    def test_head_permutation_permutes_channel_blocks(self):
        heads = [head(4, 3, seed=60 + i) for i in range(3)]
        x = make_rng(61).standard_normal((20, 12))
        y = multihead_physattn(x, heads, "fast")
        perm = [2, 0, 1]
        xp = np.concatenate([x[:, 4 * j:4 * (j + 1)] for j in perm], axis=1)
        yp = multihead_physattn(xp, [heads[j] for j in perm], "fast")
        expected = np.concatenate([y[:, 4 * j:4 * (j + 1)] for j in perm], axis=1)
        assert np.array_equal(yp, expected)

    def test_indivisible_channels_rejected(self):
        heads = [head(4, 2, seed=70) for _ in range(3)]
        with pytest.raises(ShapeError):
            multihead_physattn(np.zeros((5, 10)), heads, "fast")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            multihead_physattn(np.zeros((5, 4)), [head(4, 2)], "sideways")


class TestInvariants:
    def test_equivalence_triangle_sample(self):
        # The acceptance suite runs >= 100 seeds; keep a quick version here.
        for seed in range(10):
            rng = make_rng(1000 + seed)
            n = int(rng.integers(2, 300))
            p = head(8, 4, seed=2000 + seed)
            x = rng.standard_normal((n, 8))
            y_o = full_head(x, p, "original")
            for mode, tile in (("fast", None), ("tiled", max(1, n // 3)), ("tiled", 7)):
                assert rel_err(full_head(x, p, mode, tile), y_o) <= 1e-10

    def test_slice_weight_rows_sum_to_one(self):
        p = head(8, 6, seed=80)
        x = make_rng(81).standard_normal((300, 8)) * 10
        _, w = slice_fast(x, p)
        validate_slice_weights(w, tol=1e-12)

    def test_n_scaling_structure_of_fast_path(self):
        # Only three multiply-add stages may grow with N on the fast path.
        p = head(8, 4, seed=82)
        counts = {}
        for n in (64, 128):
            x = make_rng(83).standard_normal((n, 8))
            with counters.count_ops() as c:
                full_head(x, p, "fast")
            counts[n] = c.madds_by_tag
        growing = {t for t in counts[64] if counts[128][t] != counts[64][t]}
        assert growing == {"linear2", "slice_matmul", "deslice_matmul"}
