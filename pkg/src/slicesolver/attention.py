"""Slice attention over mesh points, in three equivalent formulations.

A head soft-assigns N points to M latent states via row-stochastic slice
weights w = softmax(Linear2(x)), attends over the M states, and redistributes
the result back to points. The three paths:

* original: project points first (x_proj = Linear1(x)), aggregate with
  normalized weights, s = (w d^-1)^T x_proj; deslice as Linear3(w s').
* fast: aggregate raw features first (s_raw = w^T x), normalize, then apply
  Linear1 in the M-dimensional state domain; deslice as w Linear3(s').
  Associativity makes this exactly the original, at far fewer point-domain
  multiplies. Normalization is applied before Linear1 so the equality holds
  with biases too, and row-stochastic w passes the Linear3 bias through.
* tiled: the fast path with the point loop cut into row tiles whose
  (s_raw, d) contributions accumulate into running buffers, so the full
  N x M weight matrix is never resident. Under gradients each tile is
  checkpointed and recomputed in the backward sweep.

All public functions operate on plain arrays; the `*_t` functions are the
tape-aware versions used by the model and the trainer.
"""

from __future__ import annotations

import math
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tensor
from .errors import DegenerateSliceError, ShapeError

MODES = ("original", "fast", "tiled")

# Minimum admissible per-slice weight mass. Cannot be hit with finite logits;
# guards NaN propagation if a caller feeds pathological inputs.
D_FLOOR = 1e-30

# Type aliases for the matrix-valued domain objects. Slice weights are
# (N, M) with rows summing to 1; physical states are (M, C_h).
SliceWeights = np.ndarray
PhysicalStates = np.ndarray


@dataclass
class HeadParams:
    """All learnable weights of one attention head.

    w1/w3 map within the per-head channel space, w2 produces slice logits,
    and wq/wk/wv/wo parameterize self-attention over the M states (bias-free).
    """

    w1: Tensor
    b1: Tensor | None
    w2: Tensor
    b2: Tensor | None
    w3: Tensor
    b3: Tensor | None
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, head_channels: int, slices: int, rng: np.random.Generator,
             bias: bool = True) -> "HeadParams":
        c, m = head_channels, slices
        mk = lambda shape, fan: ad.parameter(linalg.uniform_init(rng, shape, fan))
        return cls(
            w1=mk((c, c), c), b1=mk((c,), c) if bias else None,
            w2=mk((c, m), c), b2=mk((m,), c) if bias else None,
            w3=mk((c, c), c), b3=mk((c,), c) if bias else None,
            wq=mk((c, c), c), wk=mk((c, c), c), wv=mk((c, c), c), wo=mk((c, c), c),
        )

    @property
    def head_channels(self) -> int:
        return self.w1.data.shape[0]

    @property
    def slices(self) -> int:
        return self.w2.data.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                out.append((f.name, t))
        return out

    def validate(self) -> None:
        c, m = self.head_channels, self.slices
        expect = {"w1": (c, c), "w2": (c, m), "w3": (c, c),
                  "wq": (c, c), "wk": (c, c), "wv": (c, c), "wo": (c, c),
                  "b1": (c,), "b2": (m,), "b3": (c,)}
        for name, t in self.tensors():
            if t.data.shape != expect[name]:
                raise ShapeError(f"HeadParams.{name}: expected {expect[name]}, got {t.data.shape}")


@dataclass
class SliceAccumulator:
    """Running (s_raw, d) pair accumulated across tiles or chunks.

    Addition of per-tile contributions commutes up to float rounding, so
    accumulation order only matters at the 1e-10 level.
    """

    s_raw: np.ndarray
    d: np.ndarray
    tiles_seen: int = 0

    @classmethod
    def empty(cls, slices: int, head_channels: int, dtype=np.float64) -> "SliceAccumulator":
        return cls(np.zeros((slices, head_channels), dtype=dtype),
                   np.zeros(slices, dtype=dtype))

    def add_tile(self, w_tile: np.ndarray, x_tile: np.ndarray) -> None:
        self.s_raw += linalg.matmul_tn(w_tile, x_tile, tag="slice_matmul")
        self.d += w_tile.sum(axis=0)
        self.tiles_seen += 1

    def merge(self, other: "SliceAccumulator") -> None:
        self.s_raw += other.s_raw
        self.d += other.d
        self.tiles_seen += other.tiles_seen

    def states(self) -> np.ndarray:
        """Normalized states s_raw * d^-1 (rows scaled by accumulated mass)."""
        _check_d(self.d)
        return self.s_raw / self.d[:, None]


def _check_d(d: np.ndarray) -> None:
    dmin = float(d.min()) if d.size else 0.0
    if dmin < D_FLOOR:
        raise DegenerateSliceError(
            f"slice normalization underflow: min d_jj = {dmin:.3e} < {D_FLOOR:.0e}")


def tile_ranges(n: int, tile_size: int) -> list[tuple[int, int]]:
    """Row tiles by ceiling division; the last tile may be short."""
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    tile_size = min(tile_size, n)
    return [(lo, min(lo + tile_size, n)) for lo in range(0, n, max(tile_size, 1))]


# ---------------------------------------------------------------------------
# tape-aware per-head paths


def slice_original_t(x: Tensor, p: HeadParams) -> tuple[Tensor, Tensor]:
    x_proj = ad.linear(x, p.w1, p.b1, tag="linear1")
    w = ad.softmax_rows(ad.linear(x, p.w2, p.b2, tag="linear2"), tag="softmax_w")
    d = ad.colsum(w, tag="colsum_d")
    _check_d(d.data)
    w_norm = ad.coldiv(w, d, tag="coldiv_w")
    s = ad.matmul_tn(w_norm, x_proj, tag="slice_matmul")
    return s, w


def slice_fast_t(x: Tensor, p: HeadParams) -> tuple[Tensor, Tensor]:
    w = ad.softmax_rows(ad.linear(x, p.w2, p.b2, tag="linear2"), tag="softmax_w")
    d = ad.colsum(w, tag="colsum_d")
    _check_d(d.data)
    s_raw = ad.matmul_tn(w, x, tag="slice_matmul")
    s = ad.linear(ad.rowdiv(s_raw, d, tag="rowdiv_s"), p.w1, p.b1, tag="linear1")
    return s, w


def deslice_original_t(s_prime: Tensor, w: Tensor, p: HeadParams) -> Tensor:
    return ad.linear(ad.matmul(w, s_prime, tag="deslice_matmul"), p.w3, p.b3, tag="linear3")


def deslice_fast_t(s_prime: Tensor, w: Tensor, p: HeadParams) -> Tensor:
    s_out = ad.linear(s_prime, p.w3, p.b3, tag="linear3")
    return ad.matmul(w, s_out, tag="deslice_matmul")


def states_attention_t(s: Tensor, p: HeadParams) -> Tensor:
    c_h = s.data.shape[1]
    q = ad.linear(s, p.wq, None, tag="attn_qkv")
    k = ad.linear(s, p.wk, None, tag="attn_qkv")
    v = ad.linear(s, p.wv, None, tag="attn_qkv")
    scores = ad.matmul_nt(q, k, tag="attn_scores", scale=1.0 / math.sqrt(c_h))
    a = ad.softmax_rows(scores, tag="attn_softmax")
    return ad.linear(ad.matmul(a, v, tag="attn_av"), p.wo, None, tag="attn_out")


def _finalize_states_t(packed: Tensor, p: HeadParams) -> Tensor:
    """packed = [s_raw | d] -> s'_out, shared by the tiled paths."""
    c_h = p.head_channels
    s_raw = ad.col_slice(packed, 0, c_h, tag="unpack_s_raw")
    d = ad.col_vector(packed, c_h, tag="unpack_d")
    _check_d(d.data)
    s = ad.linear(ad.rowdiv(s_raw, d, tag="rowdiv_s"), p.w1, p.b1, tag="linear1")
    return ad.linear(states_attention_t(s, p), p.w3, p.b3, tag="linear3")


def _tile_pack(x_t: Tensor, w2: Tensor, b2: Tensor | None) -> Tensor:
    w = ad.softmax_rows(ad.linear(x_t, w2, b2, tag="linear2"), tag="softmax_w")
    return ad.append_col(ad.matmul_tn(w, x_t, tag="slice_matmul"),
                         ad.colsum(w, tag="colsum_d"), tag="pack_sd")


def _tile_deslice(x_t: Tensor, s_out: Tensor, w2: Tensor, b2: Tensor | None) -> Tensor:
    w = ad.softmax_rows(ad.linear(x_t, w2, b2, tag="linear2"), tag="softmax_w")
    return ad.matmul(w, s_out, tag="deslice_matmul")


def _physattn_tiled_grad_checkpointed(x: Tensor, p: HeadParams,
                                      ranges: Sequence[tuple[int, int]]) -> Tensor:
    # Algorithm: per tile, (s_raw, d) contributions are packed into one value
    # and checkpointed; slice weights are recomputed per tile both here and in
    # the second (deslice) loop, honoring checkpointing.
    if p.b2 is not None:
        packed = ad.tile_checkpoint_sum(_tile_pack, x, ranges, shared=(p.w2, p.b2),
                                        tag="tile_pack_sum")
    else:
        packed = ad.tile_checkpoint_sum(lambda xt, w2: _tile_pack(xt, w2, None),
                                        x, ranges, shared=(p.w2,), tag="tile_pack_sum")
    s_out = _finalize_states_t(packed, p)
    if p.b2 is not None:
        return ad.tile_checkpoint_map(_tile_deslice, x, ranges,
                                      shared=(s_out, p.w2, p.b2), tag="tile_deslice_map")
    return ad.tile_checkpoint_map(lambda xt, so, w2: _tile_deslice(xt, so, w2, None),
                                  x, ranges, shared=(s_out, p.w2), tag="tile_deslice_map")


def _physattn_tiled_grad_plain(x: Tensor, p: HeadParams,
                               ranges: Sequence[tuple[int, int]]) -> Tensor:
    # Checkpointing off: every per-tile weight matrix stays on the tape.
    s_raw_acc: Tensor | None = None
    d_acc: Tensor | None = None
    w_tiles: list[Tensor] = []
    for lo, hi in ranges:
        x_t = ad.row_slice(x, lo, hi, tag="tile_slice")
        w = ad.softmax_rows(ad.linear(x_t, p.w2, p.b2, tag="linear2"), tag="softmax_w")
        s_raw_t = ad.matmul_tn(w, x_t, tag="slice_matmul")
        d_t = ad.colsum(w, tag="colsum_d")
        s_raw_acc = s_raw_t if s_raw_acc is None else ad.add(s_raw_acc, s_raw_t, tag="acc_s_raw")
        d_acc = d_t if d_acc is None else ad.add(d_acc, d_t, tag="acc_d")
        w_tiles.append(w)
    _check_d(d_acc.data)
    s = ad.linear(ad.rowdiv(s_raw_acc, d_acc, tag="rowdiv_s"), p.w1, p.b1, tag="linear1")
    s_out = ad.linear(states_attention_t(s, p), p.w3, p.b3, tag="linear3")
    outs = [ad.matmul(w, s_out, tag="deslice_matmul") for w in w_tiles]
    return ad.concat_rows(outs, tag="tile_concat")


def _physattn_tiled_inference(x: Tensor, p: HeadParams, ranges: Sequence[tuple[int, int]],
                              parallel: bool = False) -> Tensor:
    # Pure inference: per-tile weights are cached between the two loops
    # (memory parity with the untiled path, but no recomputation).
    xd = x.data
    m, c_h = p.slices, p.head_channels
    acc = SliceAccumulator.empty(m, c_h, dtype=xd.dtype)

    def tile_contrib(lo: int, hi: int):
        x_t = xd[lo:hi]
        logits = linalg.matmul(x_t, p.w2.data, tag="linear2")
        if p.b2 is not None:
            logits += p.b2.data
        w = linalg.softmax_rows(logits, tag="softmax_w")
        return w, linalg.matmul_tn(w, x_t, tag="slice_matmul"), w.sum(axis=0)

    w_tiles: list[np.ndarray | None] = [None] * len(ranges)
    if parallel and len(ranges) > 1:
        # Completion-order reduction; matches sequential within reassociation
        # tolerance (documented 1e-8 contract).
        with ThreadPoolExecutor() as pool:
            pending = {pool.submit(tile_contrib, lo, hi): i
                       for i, (lo, hi) in enumerate(ranges)}
            while pending:
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    i = pending.pop(fut)
                    w, s_raw_t, d_t = fut.result()
                    w_tiles[i] = w
                    acc.s_raw += s_raw_t
                    acc.d += d_t
                    acc.tiles_seen += 1
    else:
        for i, (lo, hi) in enumerate(ranges):
            w, s_raw_t, d_t = tile_contrib(lo, hi)
            w_tiles[i] = w
            acc.s_raw += s_raw_t
            acc.d += d_t
            acc.tiles_seen += 1

    packed = np.concatenate([acc.s_raw, acc.d[:, None]], axis=1)
    s_out = _finalize_states_t(Tensor(packed), p).data
    out = np.empty((xd.shape[0], c_h), dtype=xd.dtype)
    for (lo, hi), w in zip(ranges, w_tiles):
        out[lo:hi] = linalg.matmul(w, s_out, tag="deslice_matmul")
    return Tensor(out)


def physattn_head_t(x: Tensor, p: HeadParams, mode: str, tile_size: int | None = None,
                    checkpoint_tiles: bool = True, parallel: bool = False) -> Tensor:
    """One full head: slice -> states attention -> deslice, selected path."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if x.data.shape[0] < 1:
        raise ShapeError("attention input must have at least one row")
    if mode == "original":
        s, w = slice_original_t(x, p)
        return deslice_original_t(states_attention_t(s, p), w, p)
    if mode == "fast":
        s, w = slice_fast_t(x, p)
        return deslice_fast_t(states_attention_t(s, p), w, p)
    ranges = tile_ranges(x.data.shape[0], tile_size if tile_size is not None else x.data.shape[0])
    if not (ad.grad_enabled() and any(t.requires_grad for _, t in p.tensors())):
        return _physattn_tiled_inference(x, p, ranges, parallel=parallel)
    if checkpoint_tiles:
        return _physattn_tiled_grad_checkpointed(x, p, ranges)
    return _physattn_tiled_grad_plain(x, p, ranges)


def multihead_physattn_t(x: Tensor, heads: Sequence[HeadParams], mode: str,
                         tile_size: int | None = None, checkpoint_tiles: bool = True,
                         parallel: bool = False) -> Tensor:
    c = x.data.shape[1]
    n_heads = len(heads)
    if n_heads < 1 or c % n_heads != 0:
        raise ShapeError(f"channels ({c}) must divide evenly into {n_heads} heads")
    c_h = c // n_heads
    outs = []
    for i, p in enumerate(heads):
        if p.head_channels != c_h:
            raise ShapeError(f"head {i}: expected per-head channels {c_h}, got {p.head_channels}")
        x_h = ad.col_slice(x, i * c_h, (i + 1) * c_h, tag="head_split")
        outs.append(physattn_head_t(x_h, p, mode, tile_size, checkpoint_tiles, parallel))
    return ad.concat_cols(outs, tag="head_concat")


# ---------------------------------------------------------------------------
# array-facing API


def slice_original(x: np.ndarray, p: HeadParams) -> tuple[PhysicalStates, SliceWeights]:
    """Eq-style slice: returns (states, weights) for one head."""
    with ad.no_grad():
        s, w = slice_original_t(Tensor(x), p)
    return s.data, w.data


def slice_fast(x: np.ndarray, p: HeadParams) -> tuple[PhysicalStates, SliceWeights]:
    """Reordered slice; equals slice_original to float rounding."""
    with ad.no_grad():
        s, w = slice_fast_t(Tensor(x), p)
    return s.data, w.data


def deslice_original(s_prime: PhysicalStates, w: SliceWeights, p: HeadParams) -> np.ndarray:
    with ad.no_grad():
        return deslice_original_t(Tensor(s_prime), Tensor(w), p).data


def deslice_fast(s_prime: PhysicalStates, w: SliceWeights, p: HeadParams) -> np.ndarray:
    with ad.no_grad():
        return deslice_fast_t(Tensor(s_prime), Tensor(w), p).data


def states_attention(s: PhysicalStates, p: HeadParams) -> PhysicalStates:
    """Scaled dot-product self-attention over the M state tokens."""
    if s.shape[0] < 1:
        raise ShapeError("states_attention needs at least one state")
    with ad.no_grad():
        return states_attention_t(Tensor(s), p).data


def physattn_tiled(x: np.ndarray, p: HeadParams, tile_size: int,
                   parallel: bool = False) -> np.ndarray:
    """Tile-accumulated head; output equals the untiled fast path."""
    with ad.no_grad():
        return physattn_head_t(Tensor(x), p, "tiled", tile_size, parallel=parallel).data


def multihead_physattn(x: np.ndarray, heads: Sequence[HeadParams], mode: str,
                       tile_size: int | None = None, parallel: bool = False) -> np.ndarray:
    """Split channels into heads, run the selected path, concatenate."""
    with ad.no_grad():
        return multihead_physattn_t(Tensor(x), heads, mode, tile_size, parallel=parallel).data


def validate_slice_weights(w: np.ndarray, tol: float = 1e-12) -> None:
    """Assert the row-stochastic invariant of slice weights."""
    if w.ndim != 2:
        raise ShapeError(f"slice weights must be 2-D, got {w.shape}")
    if (w < 0).any():
        raise ValueError("slice weights must be nonnegative")
    err = float(np.abs(w.sum(axis=1) - 1.0).max())
    if err > tol:
        raise ValueError(f"slice weight rows must sum to 1 (max deviation {err:.3e})")
