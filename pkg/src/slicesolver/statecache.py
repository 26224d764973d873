"""Decoupled inference: chunked state-cache construction and per-point decode.

Building the cache separates state estimation from field prediction. The mesh
is consumed in non-overlapping, index-ordered chunks; per layer, every
chunk's (s_raw, d) contribution accumulates into one running pair, which is
then finalized (normalize, Linear1, states attention, Linear3) into that
layer's cached states. Chunk trajectories advance one layer per frontier:

    sweep A  for each chunk: accumulate layer l's (s_raw, d) from its
             current features;
    finalize layer l's states from the global accumulator;
    sweep B  for each chunk: advance its features through block l against
             the finalized states.

That is 2*K chunk passes per layer, O(K*L) total, instead of recomputing
every chunk from layer 1 at each frontier (O(K*L^2)). Chunk features persist
between frontiers in host memory (the working set per pass is one chunk).

Decoding a query point replays the block structure, but each attention
sublayer reduces to softmax(Linear2(.)) @ cached_states: no aggregation, no
states attention, so the cost per point does not depend on the size of the
mesh the cache was built from, and each output row depends only on its own
input row plus the cache.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import linalg
from .attention import SliceAccumulator, states_attention, tile_ranges
from .errors import FingerprintMismatchError, ShapeError
from .meshes import Bounds, MeshBatch
from .model import (LN_EPS, BlockParams, ModelParams, destandardize,
                    normalize_coords, params_fingerprint)

CACHE_FORMAT_VERSION = 1


@dataclass
class ChunkPlan:
    """Disjoint, complete, index-ordered ranges covering 1..N."""

    chunk_size: int
    ranges: list[tuple[int, int]]

    @property
    def n_chunks(self) -> int:
        return len(self.ranges)

    @classmethod
    def plan(cls, n: int, chunk_size: int) -> "ChunkPlan":
        if chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
        return cls(chunk_size=chunk_size, ranges=tile_ranges(n, chunk_size))


@dataclass
class StateCache:
    """Per-layer, per-head cached states plus the provenance they require."""

    layers: int
    heads: int
    slices: int
    head_channels: int
    fingerprint: str
    coord_lo: np.ndarray
    coord_hi: np.ndarray
    states: list[list[np.ndarray]]  # [layer][head] -> (M, C_h)

    def check(self, params: ModelParams) -> None:
        fp = params_fingerprint(params)
        if fp != self.fingerprint:
            raise FingerprintMismatchError(
                f"cache was built with parameters {self.fingerprint}, got {fp}")


# ---------------------------------------------------------------------------
# shared array-level blocks


def _embed(params: ModelParams, x0: np.ndarray) -> np.ndarray:
    h = linalg.matmul_rowstable(x0, params.embed_w1.data, tag="embed1") + params.embed_b1.data
    h = linalg.gelu(h)
    return linalg.matmul_rowstable(h, params.embed_w2.data, tag="embed2") + params.embed_b2.data


def _head_weights(x_h: np.ndarray, p) -> np.ndarray:
    logits = linalg.matmul_rowstable(x_h, p.w2.data, tag="linear2")
    if p.b2 is not None:
        logits += p.b2.data
    return linalg.softmax_rows(logits, tag="softmax_w")


def _advance_block(x: np.ndarray, blk: BlockParams, layer_states: Sequence[np.ndarray],
                   head_channels: int) -> np.ndarray:
    """One residual block where attention is 'deslice against given states'."""
    h = linalg.layer_norm_rows(x, blk.ln1_gain.data, blk.ln1_shift.data, LN_EPS)
    outs = []
    for j, p in enumerate(blk.heads):
        x_h = np.ascontiguousarray(h[:, j * head_channels:(j + 1) * head_channels])
        w = _head_weights(x_h, p)
        outs.append(linalg.matmul_rowstable(w, layer_states[j], tag="deslice_matmul"))
    x = x + np.concatenate(outs, axis=1)
    h2 = linalg.layer_norm_rows(x, blk.ln2_gain.data, blk.ln2_shift.data, LN_EPS)
    ff = linalg.gelu(linalg.matmul_rowstable(h2, blk.ffn_w1.data, tag="ffn1") + blk.ffn_b1.data)
    ff = linalg.matmul_rowstable(ff, blk.ffn_w2.data, tag="ffn2") + blk.ffn_b2.data
    return x + ff


def _finalize(acc: SliceAccumulator, p) -> np.ndarray:
    s = linalg.matmul(acc.states(), p.w1.data, tag="linear1")
    if p.b1 is not None:
        s += p.b1.data
    s_prime = states_attention(s, p)
    out = linalg.matmul(s_prime, p.w3.data, tag="linear3")
    if p.b3 is not None:
        out += p.b3.data
    return out


# ---------------------------------------------------------------------------
# cache construction


def build_cache(params: ModelParams, mesh: MeshBatch | Iterable[MeshBatch],
                chunk_size: int | None = None) -> StateCache:
    """Accumulate the full mesh into per-layer states, chunk by chunk.

    `mesh` is either a whole MeshBatch (split by `chunk_size`) or an iterable
    of index-ordered chunks. The result matches the states of a monolithic
    forward pass up to float reassociation of the chunk sums.
    """
    cfg = params.config
    if isinstance(mesh, MeshBatch):
        plan = ChunkPlan.plan(mesh.n, chunk_size if chunk_size is not None else mesh.n)
        chunks = [mesh.slice_rows(lo, hi) for lo, hi in plan.ranges]
        if mesh.bounds is not None:
            bounds: Bounds = mesh.bounds
        else:
            bounds = params.bounds() or mesh.resolve_bounds()
    else:
        chunks = list(mesh)
        if not chunks:
            raise ValueError("build_cache: empty mesh stream")
        pb = params.bounds()
        if pb is not None:
            bounds = pb
        else:
            bounds = (np.min([c.coords.min(axis=0) for c in chunks], axis=0),
                      np.max([c.coords.max(axis=0) for c in chunks], axis=0))

    xs: list[np.ndarray] = []
    for c in chunks:
        x0 = np.concatenate([normalize_coords(c.coords, bounds), c.features], axis=1)
        if x0.shape[1] != cfg.in_dim:
            raise ShapeError(
                f"chunk supplies {x0.shape[1]} input columns, model expects {cfg.in_dim}")
        xs.append(_embed(params, x0))

    ch = cfg.head_channels
    states: list[list[np.ndarray]] = []
    for blk in params.blocks:
        accs = [SliceAccumulator.empty(cfg.slices, ch) for _ in range(cfg.heads)]
        for x in xs:  # sweep A: accumulate this frontier's (s_raw, d)
            h = linalg.layer_norm_rows(x, blk.ln1_gain.data, blk.ln1_shift.data, LN_EPS)
            for j, p in enumerate(blk.heads):
                x_h = np.ascontiguousarray(h[:, j * ch:(j + 1) * ch])
                accs[j].add_tile(_head_weights(x_h, p), x_h)
        layer_states = [_finalize(accs[j], p) for j, p in enumerate(blk.heads)]
        states.append(layer_states)
        xs = [_advance_block(x, blk, layer_states, ch) for x in xs]  # sweep B

    return StateCache(
        layers=cfg.layers, heads=cfg.heads, slices=cfg.slices, head_channels=ch,
        fingerprint=params_fingerprint(params),
        coord_lo=np.asarray(bounds[0], dtype=np.float64),
        coord_hi=np.asarray(bounds[1], dtype=np.float64),
        states=states,
    )


# ---------------------------------------------------------------------------
# decoding


def decode_points(cache: StateCache, params: ModelParams, query: MeshBatch) -> np.ndarray:
    """Predict fields at arbitrary query points against a built cache."""
    cache.check(params)
    cfg = params.config
    x0 = np.concatenate(
        [normalize_coords(query.coords, (cache.coord_lo, cache.coord_hi)), query.features],
        axis=1)
    if x0.shape[1] != cfg.in_dim:
        raise ShapeError(f"query supplies {x0.shape[1]} input columns, model expects {cfg.in_dim}")
    x = _embed(params, x0)
    for blk, layer_states in zip(params.blocks, cache.states):
        x = _advance_block(x, blk, layer_states, cfg.head_channels)
    y = linalg.matmul_rowstable(x, params.head_w.data, tag="head") + params.head_b.data
    return destandardize(params, y)


def decode_stream(cache: StateCache, params: ModelParams,
                  query_stream: Iterable[MeshBatch], out_sink) -> dict:
    """Stream decode over query chunks, writing one CSV row per point.

    `out_sink` is a path or a writable text file. Peak resident query memory
    is one chunk; the concatenated output is identical to a one-shot decode.
    """
    own = isinstance(out_sink, (str, os.PathLike))
    f = open(out_sink, "w", encoding="utf-8") if own else out_sink
    points = 0
    chunks = 0
    try:
        f.write(",".join(f"p{i + 1}" for i in range(params.config.out_dim)) + "\n")
        for i, chunk in enumerate(query_stream):
            try:
                pred = decode_points(cache, params, chunk)
                for row in pred:
                    f.write(",".join(format(v, ".17g") for v in row) + "\n")
            except OSError as e:
                raise RuntimeError(f"decode_stream: I/O failure on chunk {i}: {e}") from e
            points += chunk.n
            chunks += 1
    finally:
        if own:
            f.close()
    return {"points": points, "chunks": chunks}


def iter_query_chunks(mesh: MeshBatch, chunk_size: int) -> Iterator[MeshBatch]:
    for lo, hi in ChunkPlan.plan(mesh.n, chunk_size).ranges:
        yield mesh.slice_rows(lo, hi)


# ---------------------------------------------------------------------------
# cache file format


def _paths(path: str) -> tuple[str, str]:
    base = path[:-5] if str(path).endswith(".json") else str(path)
    return base + ".json", base + ".bin"


def save_cache(path: str, cache: StateCache) -> None:
    """JSON manifest plus little-endian float64 blob, layer-major order."""
    manifest_path, blob_path = _paths(path)
    manifest = {
        "format_version": CACHE_FORMAT_VERSION,
        "layers": cache.layers,
        "heads": cache.heads,
        "slices": cache.slices,
        "head_channels": cache.head_channels,
        "fingerprint": cache.fingerprint,
        "coord_lo": [float(v) for v in cache.coord_lo],
        "coord_hi": [float(v) for v in cache.coord_hi],
        "blob": os.path.basename(blob_path),
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    with open(blob_path, "wb") as f:
        for layer_states in cache.states:
            for s in layer_states:
                f.write(np.ascontiguousarray(s, dtype="<f8").tobytes())


def load_cache(path: str) -> StateCache:
    manifest_path, blob_path = _paths(path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        man = json.load(f)
    if man.get("format_version") != CACHE_FORMAT_VERSION:
        raise ValueError(f"unsupported cache format: {man.get('format_version')}")
    m, ch = man["slices"], man["head_channels"]
    blob = open(blob_path, "rb").read()
    states = []
    offset = 0
    stride = m * ch * 8
    for _ in range(man["layers"]):
        layer = []
        for _ in range(man["heads"]):
            arr = np.frombuffer(blob, dtype="<f8", count=m * ch, offset=offset)
            layer.append(arr.reshape(m, ch).astype(np.float64))
            offset += stride
        states.append(layer)
    return StateCache(
        layers=man["layers"], heads=man["heads"], slices=m, head_channels=ch,
        fingerprint=man["fingerprint"],
        coord_lo=np.array(man["coord_lo"]), coord_hi=np.array(man["coord_hi"]),
        states=states,
    )
