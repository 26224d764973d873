"""Symbolic and numeric time/space cost model for the attention layer.

The time side reproduces the per-operation complexity table of each variant
(original: five N-dependent time terms and four N-dependent space terms;
optimized: three and two) and evaluates exact multiply-add counts per op tag,
which must equal the instrumented kernel counters bit-for-bit. The space side
models the tape of the reference engine buffer-by-buffer, which is how the
tiling claims (peak weight storage N_t x M, nothing N x M retained under
checkpointing) are verified against measured retention.

Conventions (fixed so ratios are stable): one multiply-add = 2 flops; softmax
= 4 flops per element (exp, subtract, sum share, divide); bias adds and other
elementwise work are excluded from the multiply-add count. Multi-head layers
evaluate per head and multiply by H; the symbolic column keeps the table's
aggregate-C monomials. Latency is never modeled, only reported by the bench
command, and is treated as qualitative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import counters as cnt
from . import linalg
from .attention import HeadParams, multihead_physattn_t
from .autodiff import Tensor, no_grad

VARIANTS = ("original", "optimized")
SOFTMAX_FLOPS_PER_ELEMENT = 4
MADD_FLOPS = 2


@dataclass
class CostConfig:
    n: int
    channels: int = 256
    slices: int = 64
    heads: int = 8
    layers: int = 1
    tile_size: int | None = None
    itemsize: int = 8

    def __post_init__(self):
        for name in ("n", "channels", "slices", "heads", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels ({self.channels}) must divide into heads ({self.heads})")

    @property
    def head_channels(self) -> int:
        return self.channels // self.heads


@dataclass
class CostTerm:
    op: str
    time_poly: str
    space_poly: str
    madds_by_tag: dict[str, int]
    softmax_by_tag: dict[str, int]
    space_bytes: int
    n_dependent_time: bool
    n_dependent_space: bool

    @property
    def madds(self) -> int:
        return sum(self.madds_by_tag.values())

    @property
    def softmax_elements(self) -> int:
        return sum(self.softmax_by_tag.values())

    @property
    def time_flops(self) -> int:
        return MADD_FLOPS * self.madds + SOFTMAX_FLOPS_PER_ELEMENT * self.softmax_elements

    @property
    def n_dependent(self) -> bool:
        return self.n_dependent_time


@dataclass
class CostReport:
    variant: str
    config: CostConfig
    terms: list[CostTerm]

    @property
    def n_related_time(self) -> int:
        return sum(1 for t in self.terms if t.n_dependent_time)

    @property
    def n_related_space(self) -> int:
        return sum(1 for t in self.terms if t.n_dependent_space)

    @property
    def madds_per_layer(self) -> int:
        return sum(t.madds for t in self.terms)

    @property
    def softmax_per_layer(self) -> int:
        return sum(t.softmax_elements for t in self.terms)

    @property
    def time_flops_per_layer(self) -> int:
        return sum(t.time_flops for t in self.terms)

    @property
    def time_flops_total(self) -> int:
        return self.config.layers * self.time_flops_per_layer

    def madds_by_tag(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.terms:
            for tag, v in t.madds_by_tag.items():
                out[tag] = out.get(tag, 0) + v
        return out

    def softmax_by_tag(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.terms:
            for tag, v in t.softmax_by_tag.items():
                out[tag] = out.get(tag, 0) + v
        return out


def _attention_term(cfg: CostConfig) -> CostTerm:
    n_, c, m, h, ch = cfg.n, cfg.channels, cfg.slices, cfg.heads, cfg.head_channels
    return CostTerm(
        op="Attention(s)",
        time_poly="O(M^2 C)", space_poly="O(M^2 + M C)",
        madds_by_tag={"attn_qkv": 3 * h * m * ch * ch,
                      "attn_scores": h * m * m * ch,
                      "attn_av": h * m * m * ch,
                      "attn_out": h * m * ch * ch},
        softmax_by_tag={"attn_softmax": h * m * m},
        space_bytes=(h * m * m + m * c) * cfg.itemsize,
        n_dependent_time=False, n_dependent_space=False,
    )


def cost_model(variant: str, cfg: CostConfig) -> CostReport:
    """Per-operation cost terms of one attention layer under a variant."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    n_, c, m, h, ch = cfg.n, cfg.channels, cfg.slices, cfg.heads, cfg.head_channels
    B = cfg.itemsize
    softlin2 = CostTerm(
        op="Softmax(Linear2(x))",
        time_poly="O(N C M)", space_poly="O(N M)",
        madds_by_tag={"linear2": h * n_ * ch * m},
        softmax_by_tag={"softmax_w": h * n_ * m},
        space_bytes=h * n_ * m * B,
        n_dependent_time=True, n_dependent_space=True,
    )
    if variant == "original":
        terms = [
            CostTerm(op="Linear1(x)", time_poly="O(N C^2)", space_poly="O(N C)",
                     madds_by_tag={"linear1": h * n_ * ch * ch}, softmax_by_tag={},
                     space_bytes=n_ * c * B,
                     n_dependent_time=True, n_dependent_space=True),
            softlin2,
            CostTerm(op="(w d^-1)^T x_proj", time_poly="O(N M C)", space_poly="O(M C)",
                     madds_by_tag={"slice_matmul": h * m * n_ * ch}, softmax_by_tag={},
                     space_bytes=m * c * B,
                     n_dependent_time=True, n_dependent_space=False),
            _attention_term(cfg),
            CostTerm(op="w s'", time_poly="O(N M C)", space_poly="O(N C)",
                     madds_by_tag={"deslice_matmul": h * n_ * m * ch}, softmax_by_tag={},
                     space_bytes=n_ * c * B,
                     n_dependent_time=True, n_dependent_space=True),
            CostTerm(op="Linear3(w s')", time_poly="O(N C^2)", space_poly="O(N C)",
                     madds_by_tag={"linear3": h * n_ * ch * ch}, softmax_by_tag={},
                     space_bytes=n_ * c * B,
                     n_dependent_time=True, n_dependent_space=True),
        ]
    else:
        terms = [
            softlin2,
            CostTerm(op="w^T x", time_poly="O(N M C)", space_poly="O(M C)",
                     madds_by_tag={"slice_matmul": h * m * n_ * ch}, softmax_by_tag={},
                     space_bytes=m * c * B,
                     n_dependent_time=True, n_dependent_space=False),
            CostTerm(op="Linear1(s_raw d^-1)", time_poly="O(M C^2)", space_poly="O(M C)",
                     madds_by_tag={"linear1": h * m * ch * ch}, softmax_by_tag={},
                     space_bytes=m * c * B,
                     n_dependent_time=False, n_dependent_space=False),
            _attention_term(cfg),
            CostTerm(op="Linear3(s')", time_poly="O(M C^2)", space_poly="O(M C)",
                     madds_by_tag={"linear3": h * m * ch * ch}, softmax_by_tag={},
                     space_bytes=m * c * B,
                     n_dependent_time=False, n_dependent_space=False),
            CostTerm(op="w s'_out", time_poly="O(N M C)", space_poly="O(N C)",
                     madds_by_tag={"deslice_matmul": h * n_ * m * ch}, softmax_by_tag={},
                     space_bytes=n_ * c * B,
                     n_dependent_time=True, n_dependent_space=True),
        ]
    return CostReport(variant=variant, config=cfg, terms=terms)


def flop_ratio(cfg: CostConfig) -> float:
    """Time-flops of the optimized layer over the original one."""
    return (cost_model("optimized", cfg).time_flops_per_layer
            / cost_model("original", cfg).time_flops_per_layer)


# ---------------------------------------------------------------------------
# memory model


@dataclass
class MemBuffer:
    name: str
    shape_desc: str
    nbytes: int
    scaling: str               # "N", "N_t", or "latent"
    full_weights: bool = False  # a resident N x M slice-weight buffer


@dataclass
class MemoryReport:
    variant: str
    training: bool
    checkpointing: bool
    tile_size: int | None
    buffers: list[MemBuffer]
    transient_bytes: int

    @property
    def retained_bytes(self) -> int:
        return sum(b.nbytes for b in self.buffers)

    @property
    def peak_bytes(self) -> int:
        return self.retained_bytes + self.transient_bytes

    def has_full_weight_buffer(self) -> bool:
        return any(b.full_weights for b in self.buffers)

    def buffer(self, name: str) -> MemBuffer:
        for b in self.buffers:
            if b.name == name:
                return b
        raise KeyError(name)


def _attn_buffers(cfg: CostConfig, with_states_out: bool) -> list[MemBuffer]:
    # states_out (the latent Linear3 output) exists only on the optimized
    # paths; the original deslice applies Linear3 in the point domain.
    m, ch, h, B = cfg.slices, cfg.head_channels, cfg.heads, cfg.itemsize
    mc = h * m * ch * B
    out = [
        MemBuffer("states", f"{h} x ({m}, {ch})", mc, "latent"),
        MemBuffer("attn_qkv", f"3*{h} x ({m}, {ch})", 3 * mc, "latent"),
        MemBuffer("attn_scores", f"{h} x ({m}, {m})", h * m * m * B, "latent"),
        MemBuffer("attn_weights", f"{h} x ({m}, {m})", h * m * m * B, "latent"),
        MemBuffer("attn_mix", f"{h} x ({m}, {ch})", mc, "latent"),
        MemBuffer("attn_out", f"{h} x ({m}, {ch})", mc, "latent"),
    ]
    if with_states_out:
        out.append(MemBuffer("states_out", f"{h} x ({m}, {ch})", mc, "latent"))
    return out


def memory_model(cfg: CostConfig, variant: str = "optimized", training: bool = True,
                 checkpointing: bool = True) -> MemoryReport:
    """Retained-buffer model of one attention layer under the tape engine.

    Training mode enumerates the tensors the reference tape keeps alive for
    the backward pass (measured retention must match within one buffer).
    `transient_bytes` is the per-tile working set that exists only while a
    tile is being processed. Inference mode reports the working-set bound of
    a gradient-free pass instead.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    n_, c, m, h, ch, B = (cfg.n, cfg.channels, cfg.slices, cfg.heads,
                          cfg.head_channels, cfg.itemsize)
    tile = min(cfg.tile_size, n_) if cfg.tile_size is not None else n_
    n_tiles = -(-n_ // tile)
    nm = h * n_ * m * B
    nc = n_ * c * B
    mc = h * m * ch * B
    mvec = h * m * B
    tiled = variant == "optimized" and cfg.tile_size is not None
    buffers: list[MemBuffer] = [
        MemBuffer("input_head_views", f"{h} x ({n_}, {ch})", nc, "N"),
    ]
    transient = 0

    if not training:
        # Gradient-free working set: weights per head live only through one
        # head's slice/deslice (tiled mode also caches that head's tiles).
        w_bytes = (n_ * m * B) if (not tiled) else (n_ * m * B)
        buffers += [
            MemBuffer("slice_weights", f"1 x ({n_}, {m})", w_bytes, "N", full_weights=True),
            *_attn_buffers(cfg, with_states_out=True),
            MemBuffer("point_updates", f"{h} x ({n_}, {ch})", nc, "N"),
        ]
        return MemoryReport(variant, training, checkpointing, cfg.tile_size, buffers,
                            transient_bytes=0)

    if variant == "original":
        buffers += [
            MemBuffer("projected_points", f"{h} x ({n_}, {ch})", nc, "N"),
            MemBuffer("slice_logits", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
            MemBuffer("slice_weights", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
            MemBuffer("slice_mass_d", f"{h} x ({m},)", mvec, "latent"),
            MemBuffer("weights_normalized", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
            *_attn_buffers(cfg, with_states_out=False),
            MemBuffer("point_mix", f"{h} x ({n_}, {ch})", nc, "N"),
            MemBuffer("point_updates", f"{h} x ({n_}, {ch})", nc, "N"),
            MemBuffer("head_concat", f"({n_}, {c})", nc, "N"),
        ]
        return MemoryReport(variant, training, checkpointing, None, buffers, 0)

    if not tiled:
        buffers += [
            MemBuffer("slice_logits", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
            MemBuffer("slice_weights", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
            MemBuffer("slice_mass_d", f"{h} x ({m},)", mvec, "latent"),
            MemBuffer("states_raw", f"{h} x ({m}, {ch})", mc, "latent"),
            MemBuffer("states_normalized", f"{h} x ({m}, {ch})", mc, "latent"),
            *_attn_buffers(cfg, with_states_out=True),
            MemBuffer("point_updates", f"{h} x ({n_}, {ch})", nc, "N"),
            MemBuffer("head_concat", f"({n_}, {c})", nc, "N"),
        ]
        return MemoryReport(variant, training, checkpointing, None, buffers, 0)

    if checkpointing:
        buffers += [
            MemBuffer("packed_tile_sums", f"{h} x ({m}, {ch + 1})", h * m * (ch + 1) * B, "latent"),
            MemBuffer("states_raw", f"{h} x ({m}, {ch})", mc, "latent"),
            MemBuffer("slice_mass_d", f"{h} x ({m},)", mvec, "latent"),
            MemBuffer("states_normalized", f"{h} x ({m}, {ch})", mc, "latent"),
            *_attn_buffers(cfg, with_states_out=True),
            MemBuffer("point_updates", f"{h} x ({n_}, {ch})", nc, "N"),
            MemBuffer("head_concat", f"({n_}, {c})", nc, "N"),
        ]
        # One tile in flight: logits + weights (N_t x M each) + output rows.
        transient = (2 * tile * m + tile * ch) * B
        return MemoryReport(variant, training, checkpointing, cfg.tile_size, buffers, transient)

    buffers += [
        MemBuffer("tile_row_slices", f"{h} x ({n_}, {ch})", nc, "N"),
        MemBuffer("slice_logits", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
        MemBuffer("slice_weights", f"{h} x ({n_}, {m})", nm, "N", full_weights=True),
        MemBuffer("tile_states_raw", f"{h}*{n_tiles} x ({m}, {ch})", n_tiles * mc, "latent"),
        MemBuffer("tile_mass", f"{h}*{n_tiles} x ({m},)", n_tiles * mvec, "latent"),
        MemBuffer("acc_states_raw", f"{h}*{n_tiles - 1} x ({m}, {ch})",
                  max(0, n_tiles - 1) * mc, "latent"),
        MemBuffer("acc_mass", f"{h}*{n_tiles - 1} x ({m},)",
                  max(0, n_tiles - 1) * mvec, "latent"),
        MemBuffer("states_normalized", f"{h} x ({m}, {ch})", mc, "latent"),
        *_attn_buffers(cfg, with_states_out=True),
        MemBuffer("point_updates", f"{h} x ({n_}, {ch})", nc, "N"),
        MemBuffer("tile_concat", f"{h} x ({n_}, {ch})", nc, "N"),
        MemBuffer("head_concat", f"({n_}, {c})", nc, "N"),
    ]
    return MemoryReport(variant, training, checkpointing, cfg.tile_size, buffers, 0)


def peak_memory_sweep(cfg: CostConfig, tile_sizes: list[int], training: bool = True,
                      checkpointing: bool = True) -> list[tuple[int, int]]:
    """Modeled peak bytes for each tile size at a fixed mesh size."""
    out = []
    for t in tile_sizes:
        c = CostConfig(n=cfg.n, channels=cfg.channels, slices=cfg.slices,
                       heads=cfg.heads, layers=cfg.layers, tile_size=t,
                       itemsize=cfg.itemsize)
        out.append((t, memory_model(c, "optimized", training, checkpointing).peak_bytes))
    return out


# ---------------------------------------------------------------------------
# instrumented runs (the measurement side)


def make_layer(cfg: CostConfig, seed: int = 0) -> tuple[np.ndarray, list[HeadParams]]:
    rng = linalg.make_rng(seed)
    x = rng.standard_normal((cfg.n, cfg.channels))
    heads = [HeadParams.init(cfg.head_channels, cfg.slices, rng) for _ in range(cfg.heads)]
    return x, heads


def run_instrumented(cfg: CostConfig, variant: str = "optimized", seed: int = 0,
                     training: bool = False,
                     checkpoint_tiles: bool = True) -> cnt.OpCounters:
    """Run one real multi-head attention layer under the op counters.

    The inference run of the optimized variant (fast or tiled) must match
    cost_model's multiply-add and softmax counts exactly. Training runs
    additionally populate the retained-buffer registry that memory_model
    mirrors.
    """
    x, heads = make_layer(cfg, seed)
    mode = "original" if variant == "original" else ("tiled" if cfg.tile_size else "fast")
    with cnt.count_ops() as counters:
        if training:
            # In a stack the attention input is itself a tape node, so make it
            # one here; otherwise the head views would not count as retained.
            multihead_physattn_t(Tensor(x, requires_grad=True), heads, mode, cfg.tile_size,
                                 checkpoint_tiles=checkpoint_tiles)
        else:
            with no_grad():
                multihead_physattn_t(Tensor(x), heads, mode, cfg.tile_size)
    return counters
