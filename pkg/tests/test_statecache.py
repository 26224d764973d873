import io

import numpy as np
import pytest

from conftest import rel_err, small_config, small_mesh
from slicesolver import counters
from slicesolver.attention import slice_fast, states_attention
from slicesolver.errors import FingerprintMismatchError
from slicesolver.linalg import gelu, layer_norm_rows, make_rng, softmax_rows
from slicesolver.meshes import MeshBatch, gen_sphere_mesh, manufactured_field
from slicesolver.model import (forward, init_params, model_input, normalize_coords,
                               param_items)
from slicesolver.statecache import (ChunkPlan, StateCache, build_cache, decode_points,
                                    decode_stream, iter_query_chunks, load_cache,
                                    save_cache)


def monolithic_states_oracle(params, mesh):
    """Layer states via the public per-head ops, stepping through the stack."""
    cfg = params.config
    x = model_input(params, mesh)
    x = gelu(x @ params.embed_w1.data + params.embed_b1.data)
    x = x @ params.embed_w2.data + params.embed_b2.data
    ch = cfg.head_channels
    states = []
    for blk in params.blocks:
        h = layer_norm_rows(x, blk.ln1_gain.data, blk.ln1_shift.data, 1e-6)
        layer_states = []
        outs = []
        for j, p in enumerate(blk.heads):
            x_h = h[:, j * ch:(j + 1) * ch]
            s, w = slice_fast(x_h, p)
            s_out = states_attention(s, p) @ p.w3.data + p.b3.data
            layer_states.append(s_out)
            outs.append(w @ s_out)
        states.append(layer_states)
        x = x + np.concatenate(outs, axis=1)
        h2 = layer_norm_rows(x, blk.ln2_gain.data, blk.ln2_shift.data, 1e-6)
        ff = gelu(h2 @ blk.ffn_w1.data + blk.ffn_b1.data) @ blk.ffn_w2.data + blk.ffn_b2.data
        x = x + ff
    return states


@pytest.fixture(scope="module")
def setup():
    cfg = small_config(layers=2, heads=2, channels=12, slices=6, ffn_hidden=24)
    params = init_params(cfg, seed=1)
    mesh = small_mesh(99, seed=2)
    return cfg, params, mesh


class TestChunkPlan:
    def test_partition_properties(self):
        plan = ChunkPlan.plan(100, 7)
        assert plan.ranges[0][0] == 0 and plan.ranges[-1][1] == 100
        assert all(a[1] == b[0] for a, b in zip(plan.ranges, plan.ranges[1:]))
        assert plan.n_chunks == 15

    def test_oversized_chunk_is_single(self):
        assert ChunkPlan.plan(10, 1000).n_chunks == 1

    def test_bad_chunk_size(self):
        with pytest.raises(ValueError):
            ChunkPlan.plan(10, 0)


class TestBuildCache:
    def test_single_chunk_matches_monolithic_states(self, setup):
        _, params, mesh = setup
        cache = build_cache(params, mesh)  # K = 1
        ref = monolithic_states_oracle(params, mesh)
        for layer_states, ref_states in zip(cache.states, ref):
            for s, r in zip(layer_states, ref_states):
                assert np.abs(s - r).max() <= 1e-12

    def test_chunk_sizes_agree(self, setup):
        _, params, mesh = setup
        ref = build_cache(params, mesh, chunk_size=99)
        for chunk_size in (333, 100, 33, 7):
            cache = build_cache(params, mesh, chunk_size=chunk_size)
            for ls, rs in zip(cache.states, ref.states):
                for s, r in zip(ls, rs):
                    assert rel_err(s, r) <= 1e-9

    def test_stream_input(self, setup):
        _, params, mesh = setup
        bounds = mesh.resolve_bounds()
        chunks = [mesh.slice_rows(lo, hi).with_bounds(bounds)
                  for lo, hi in ChunkPlan.plan(mesh.n, 25).ranges]
        cache_stream = build_cache(params, iter(chunks))
        cache_whole = build_cache(params, mesh, chunk_size=25)
        for ls, rs in zip(cache_stream.states, cache_whole.states):
            for s, r in zip(ls, rs):
                assert np.array_equal(s, r)

    def test_empty_stream_rejected(self, setup):
        _, params, _ = setup
        with pytest.raises(ValueError, match="empty"):
            build_cache(params, iter([]))


class TestDecode:
    def test_decode_reproduces_forward(self, setup):
        _, params, mesh = setup
        for chunk_size in (99, 33, 15):
            cache = build_cache(params, mesh, chunk_size=chunk_size)
            pred = decode_points(cache, params, mesh)
            assert rel_err(pred, forward(params, mesh, mode="fast")) <= 1e-9

    def test_single_point_equals_row_of_full_decode(self, setup):
        _, params, mesh = setup
        cache = build_cache(params, mesh, chunk_size=20)
        full = decode_points(cache, params, mesh)
        one = decode_points(cache, params, mesh.take(np.array([17])))
        assert np.array_equal(one[0], full[17])

    def test_per_point_independence(self, setup):
        _, params, mesh = setup
        cache = build_cache(params, mesh, chunk_size=20)
        base = decode_points(cache, params, mesh)
        mutated = MeshBatch(coords=mesh.coords.copy(), bounds=mesh.resolve_bounds())
        mutated.coords[5] += 0.25
        out = decode_points(cache, params, mutated)
        assert np.array_equal(out[7], base[7])
        assert not np.array_equal(out[5], base[5])

    def test_decode_cost_independent_of_source_mesh_size(self):
        cfg = small_config(layers=1, heads=2, channels=8, slices=4)
        params = init_params(cfg, seed=3)
        query = small_mesh(10, seed=4, with_targets=False)
        query.bounds = (np.full(3, -1.0), np.full(3, 1.0))
        totals = []
        for n_source in (64, 256):
            source = gen_sphere_mesh(n_source, make_rng(5)).with_bounds(query.bounds)
            cache = build_cache(params, source, chunk_size=32)
            with counters.count_ops() as c:
                decode_points(cache, params, query)
            totals.append((c.madds, c.softmax_elements))
        assert totals[0] == totals[1]

    def test_fingerprint_mismatch_rejected(self, setup):
        cfg, params, mesh = setup
        cache = build_cache(params, mesh)
        other = init_params(cfg, seed=77)
        with pytest.raises(FingerprintMismatchError):
            decode_points(cache, other, mesh)


class TestDecodeStream:
    def test_single_chunk_matches_decode_points(self, setup):
        _, params, mesh = setup
        cache = build_cache(params, mesh, chunk_size=30)
        sink = io.StringIO()
        summary = decode_stream(cache, params, iter_query_chunks(mesh, mesh.n), sink)
        assert summary == {"points": mesh.n, "chunks": 1}
        rows = sink.getvalue().strip().splitlines()[1:]
        direct = decode_points(cache, params, mesh)
        got = np.array([[float(v) for v in r.split(",")] for r in rows])
        assert np.array_equal(got, direct)

    def test_chunked_output_bit_identical(self, setup):
        _, params, mesh = setup
        cache = build_cache(params, mesh, chunk_size=30)
        one, ten = io.StringIO(), io.StringIO()
        decode_stream(cache, params, iter_query_chunks(mesh, mesh.n), one)
        s = decode_stream(cache, params, iter_query_chunks(mesh, 10), ten)
        assert one.getvalue() == ten.getvalue()
        assert s["chunks"] == 10
        assert s["points"] == mesh.n


class TestCacheFiles:
    def test_round_trip(self, setup, tmp_path):
        _, params, mesh = setup
        cache = build_cache(params, mesh, chunk_size=40)
        save_cache(str(tmp_path / "cache"), cache)
        loaded = load_cache(str(tmp_path / "cache"))
        assert loaded.fingerprint == cache.fingerprint
        assert np.array_equal(loaded.coord_lo, cache.coord_lo)
        for ls, rs in zip(loaded.states, cache.states):
            for s, r in zip(ls, rs):
                assert np.array_equal(s, r)
        pred = decode_points(loaded, params, mesh)
        assert rel_err(pred, forward(params, mesh)) <= 1e-9
