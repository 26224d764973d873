"""The full point-cloud surrogate network.

Structure: a 2-layer GELU MLP embeds (normalized coordinates || features)
into C channels; L pre-norm residual blocks each apply multi-head slice
attention then a feed-forward sublayer; a linear head maps to the output
fields. Coordinates are min-max normalized to [0, 1] per axis against the
mesh bounds before embedding. Predictions are de-standardized with the
target statistics stored by the trainer (identity until trained).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import linalg
from .attention import HeadParams, MODES, multihead_physattn_t
from .autodiff import Tensor
from .errors import ShapeError
from .meshes import Bounds, MeshBatch

CHECKPOINT_FORMAT_VERSION = 1
LN_EPS = 1e-6


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    channels: int = 32
    slices: int = 16
    in_dim: int = 3
    out_dim: int = 1
    ffn_hidden: int = 64
    mode: str = "fast"
    tile_size: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        for name in ("heads", "channels", "slices", "in_dim", "out_dim", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels % self.heads != 0:
            raise ShapeError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.tile_size is not None and self.tile_size < 1:
            raise ValueError("tile_size must be >= 1 when set")

    @property
    def head_channels(self) -> int:
        return self.channels // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_shift: Tensor
    heads: list[HeadParams]
    ln2_gain: Tensor
    ln2_shift: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    embed_w1: Tensor
    embed_b1: Tensor
    embed_w2: Tensor
    embed_b2: Tensor
    blocks: list[BlockParams]
    head_w: Tensor
    head_b: Tensor
    # Non-learnable pipeline state (set by the trainer, stored in checkpoints).
    coord_lo: np.ndarray | None = None
    coord_hi: np.ndarray | None = None
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def bounds(self) -> Bounds | None:
        if self.coord_lo is None or self.coord_hi is None:
            return None
        return self.coord_lo, self.coord_hi


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    rng = linalg.make_rng(seed)
    c, f = cfg.channels, cfg.ffn_hidden
    mk = lambda shape, fan: ad.parameter(linalg.uniform_init(rng, shape, fan))
    ones = lambda n: ad.parameter(np.ones(n))
    zeros = lambda n: ad.parameter(np.zeros(n))
    blocks = []
    for _ in range(cfg.layers):
        blocks.append(BlockParams(
            ln1_gain=ones(c), ln1_shift=zeros(c),
            heads=[HeadParams.init(cfg.head_channels, cfg.slices, rng)
                   for _ in range(cfg.heads)],
            ln2_gain=ones(c), ln2_shift=zeros(c),
            ffn_w1=mk((c, f), c), ffn_b1=mk((f,), c),
            ffn_w2=mk((f, c), f), ffn_b2=mk((c,), f),
        ))
    return ModelParams(
        config=cfg,
        embed_w1=mk((cfg.in_dim, c), cfg.in_dim), embed_b1=mk((c,), cfg.in_dim),
        embed_w2=mk((c, c), c), embed_b2=mk((c,), c),
        blocks=blocks,
        head_w=mk((c, cfg.out_dim), c), head_b=mk((cfg.out_dim,), c),
    )


def param_items(params: ModelParams) -> list[tuple[str, Tensor]]:
    """All learnable tensors in a fixed, serialization-stable order."""
    items = [("embed.w1", params.embed_w1), ("embed.b1", params.embed_b1),
             ("embed.w2", params.embed_w2), ("embed.b2", params.embed_b2)]
    for i, blk in enumerate(params.blocks):
        pre = f"block{i:02d}"
        items += [(f"{pre}.ln1.gain", blk.ln1_gain), (f"{pre}.ln1.shift", blk.ln1_shift)]
        for h, head in enumerate(blk.heads):
            items += [(f"{pre}.head{h}.{name}", t) for name, t in head.tensors()]
        items += [(f"{pre}.ln2.gain", blk.ln2_gain), (f"{pre}.ln2.shift", blk.ln2_shift),
                  (f"{pre}.ffn.w1", blk.ffn_w1), (f"{pre}.ffn.b1", blk.ffn_b1),
                  (f"{pre}.ffn.w2", blk.ffn_w2), (f"{pre}.ffn.b2", blk.ffn_b2)]
    items += [("head.w", params.head_w), ("head.b", params.head_b)]
    return items


def param_count(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars for a configuration."""
    c, ch, m, f = cfg.channels, cfg.head_channels, cfg.slices, cfg.ffn_hidden
    embed = cfg.in_dim * c + c + c * c + c
    per_head = (ch * ch + ch) + (ch * m + m) + (ch * ch + ch) + 4 * ch * ch
    per_block = 2 * (2 * c) + cfg.heads * per_head + (c * f + f) + (f * c + c)
    head = c * cfg.out_dim + cfg.out_dim
    return embed + cfg.layers * per_block + head


# ---------------------------------------------------------------------------
# forward


def normalize_coords(coords: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Min-max normalize to [0, 1] per axis; degenerate axes map to 0."""
    lo, hi = bounds
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (coords - lo) / span


def model_input(params: ModelParams, mesh: MeshBatch) -> np.ndarray:
    """Normalized coordinates concatenated with raw features."""
    bounds = mesh.bounds if mesh.bounds is not None else (params.bounds() or mesh.resolve_bounds())
    x = np.concatenate([normalize_coords(mesh.coords, bounds), mesh.features], axis=1)
    if x.shape[1] != params.config.in_dim:
        raise ShapeError(
            f"mesh supplies {x.shape[1]} input columns, model expects {params.config.in_dim}")
    return x


def forward_t(params: ModelParams, x0: Tensor, mode: str | None = None,
              tile_size: int | None = None, checkpoint_tiles: bool = True,
              parallel: bool = False) -> Tensor:
    """Network-space forward on already-normalized inputs (tape-aware)."""
    cfg = params.config
    mode = mode or cfg.mode
    tile_size = tile_size if tile_size is not None else cfg.tile_size
    x = ad.linear(ad.gelu(ad.linear(x0, params.embed_w1, params.embed_b1, tag="embed1"),
                          tag="embed_gelu"),
                  params.embed_w2, params.embed_b2, tag="embed2")
    for layer_idx, blk in enumerate(params.blocks):
        try:
            h = ad.layer_norm(x, blk.ln1_gain, blk.ln1_shift, eps=LN_EPS, tag="ln1")
            a = multihead_physattn_t(h, blk.heads, mode, tile_size,
                                     checkpoint_tiles=checkpoint_tiles, parallel=parallel)
            x = ad.add(x, a, tag="residual1")
            h2 = ad.layer_norm(x, blk.ln2_gain, blk.ln2_shift, eps=LN_EPS, tag="ln2")
            ff = ad.linear(ad.gelu(ad.linear(h2, blk.ffn_w1, blk.ffn_b1, tag="ffn1"),
                                   tag="ffn_gelu"),
                           blk.ffn_w2, blk.ffn_b2, tag="ffn2")
            x = ad.add(x, ff, tag="residual2")
        except ShapeError as e:
            raise ShapeError(f"layer {layer_idx}: {e}") from None
    return ad.linear(x, params.head_w, params.head_b, tag="head")


def destandardize(params: ModelParams, y: np.ndarray) -> np.ndarray:
    if params.target_mean is None or params.target_std is None:
        return y
    return params.target_mean + params.target_std * y


def forward(params: ModelParams, mesh: MeshBatch, mode: str | None = None,
            tile_size: int | None = None, parallel: bool = False) -> np.ndarray:
    """Monolithic prediction for a mesh, in physical target units."""
    x0 = model_input(params, mesh)
    with ad.no_grad():
        y = forward_t(params, Tensor(x0), mode, tile_size, parallel=parallel).data
    return destandardize(params, y)


def layer_slice_weights(params: ModelParams, mesh: MeshBatch, layer: int, head: int) -> np.ndarray:
    """Per-point slice weights (N, M) entering the given layer and head."""
    cfg = params.config
    if not (0 <= layer < cfg.layers) or not (0 <= head < cfg.heads):
        raise ValueError(f"layer/head out of range for L={cfg.layers}, H={cfg.heads}")
    x0 = model_input(params, mesh)
    with ad.no_grad():
        x = ad.linear(ad.gelu(ad.linear(Tensor(x0), params.embed_w1, params.embed_b1)),
                      params.embed_w2, params.embed_b2)
        for blk in params.blocks[:layer]:
            h = ad.layer_norm(x, blk.ln1_gain, blk.ln1_shift, eps=LN_EPS)
            a = multihead_physattn_t(h, blk.heads, "fast")
            x = ad.add(x, a)
            h2 = ad.layer_norm(x, blk.ln2_gain, blk.ln2_shift, eps=LN_EPS)
            ff = ad.linear(ad.gelu(ad.linear(h2, blk.ffn_w1, blk.ffn_b1)),
                           blk.ffn_w2, blk.ffn_b2)
            x = ad.add(x, ff)
        blk = params.blocks[layer]
        h = ad.layer_norm(x, blk.ln1_gain, blk.ln1_shift, eps=LN_EPS)
        ch = cfg.head_channels
        x_h = h.data[:, head * ch:(head + 1) * ch]
        p = blk.heads[head]
        logits = linalg.matmul(x_h, p.w2.data, tag="linear2")
        if p.b2 is not None:
            logits += p.b2.data
        return linalg.softmax_rows(logits, tag="softmax_w")


# ---------------------------------------------------------------------------
# checkpoint serialization

_META_NAMES = ("meta.coord_lo", "meta.coord_hi", "meta.target_mean", "meta.target_std")


def _all_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in param_items(params)]
    for name, arr in zip(_META_NAMES, (params.coord_lo, params.coord_hi,
                                       params.target_mean, params.target_std)):
        if arr is not None:
            out.append((name, np.asarray(arr, dtype=np.float64)))
    return out


def _blob(params: ModelParams) -> bytes:
    chunks = []
    for _, arr in _all_tensors(params):
        a = np.ascontiguousarray(arr, dtype=np.float64)
        chunks.append(a.astype("<f8", copy=False).tobytes())
    return b"".join(chunks)


def params_fingerprint(params: ModelParams) -> str:
    """64-bit checksum over the parameter blob and the config."""
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(params.config.to_dict(), sort_keys=True).encode())
    h.update(_blob(params))
    return h.hexdigest()


def _paths(path: str) -> tuple[str, str]:
    base = path[:-5] if str(path).endswith(".json") else str(path)
    return base + ".json", base + ".bin"


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Write `<path>.json` (manifest) and `<path>.bin` (little-endian blob)."""
    manifest_path, blob_path = _paths(path)
    tensors = {}
    offset = 0
    for name, arr in _all_tensors(params):
        nbytes = int(arr.size * 8)
        tensors[name] = {"shape": list(arr.shape), "dtype": "float64",
                         "byte_offset": offset, "nbytes": nbytes}
        offset += nbytes
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tensors": tensors,
        "blob": os.path.basename(blob_path),
        "fingerprint": params_fingerprint(params),
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    with open(blob_path, "wb") as f:
        f.write(_blob(params))


def load_checkpoint(path: str) -> ModelParams:
    manifest_path, blob_path = _paths(path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["config"])
    with open(blob_path, "rb") as f:
        blob = f.read()

    def read_tensor(name: str) -> np.ndarray:
        spec = manifest["tensors"][name]
        lo = spec["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=spec["nbytes"] // 8, offset=lo)
        return arr.reshape(spec["shape"]).astype(np.float64)

    params = init_params(cfg, seed=0)
    for name, t in param_items(params):
        t.data = read_tensor(name)
    for attr, name in zip(("coord_lo", "coord_hi", "target_mean", "target_std"), _META_NAMES):
        if name in manifest["tensors"]:
            setattr(params, attr, read_tensor(name))
    return params
