"""Geometry-amortized training.

Each optimizer step draws a fresh uniform random subset of the training mesh,
so the cost of a large mesh is spread across steps while the model sees many
discretizations of the same geometry. The loss is the relative L2 error over
all output columns jointly. Gradients come from the tape engine; in tiled
mode the per-tile work is gradient-checkpointed and recomputed in the
backward sweep.

One "epoch" covers each training mesh ceil(N / subset_size) times, one
expected pass over its points. Validation decodes the full mesh through the
inference cache, so it works at sizes the training step never materializes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, TrainingDivergedError
from .linalg import make_rng
from .meshes import MeshBatch
from .metrics import rel_l2
from .model import ModelParams, forward_t, model_input, param_items
from .statecache import build_cache, decode_points

GradStore = dict[str, np.ndarray]


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    subset_size: int = 2048
    seed: int = 0
    grad_clip: float = 1.0
    warmup_frac: float = 0.05
    min_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 1
    val_chunk_size: int = 4096
    standardize_targets: bool = True
    steps_per_epoch: int | None = None  # default: ceil(N / subset_size) per mesh
    checkpoint_tiles: bool = True

    def __post_init__(self):
        # lr = 0 is allowed as an explicit no-op (freezes parameters).
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    final_train_loss: float
    final_val_rel_l2: float | None


def backward(params: ModelParams, mesh: MeshBatch, targets: np.ndarray,
             mode: str | None = None, tile_size: int | None = None,
             checkpoint_tiles: bool = True) -> tuple[float, GradStore]:
    """Loss ||pred - targets|| / ||targets|| and exact parameter gradients."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (mesh.n, params.config.out_dim):
        raise ShapeError(
            f"targets must be ({mesh.n}, {params.config.out_dim}), got {targets.shape}")
    items = param_items(params)
    for _, t in items:
        t.zero_grad()
    x0 = Tensor(model_input(params, mesh))
    pred = forward_t(params, x0, mode, tile_size, checkpoint_tiles=checkpoint_tiles)
    loss = ad.rel_l2_loss(pred, targets)
    loss.backward()
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for name, t in items}
    for _, t in items:
        t.zero_grad()
    return float(loss.data), grads


def amortized_sample(mesh: MeshBatch, n: int, rng: np.random.Generator) -> MeshBatch:
    """Uniform subset of n points without replacement; keeps original indices
    and the source mesh's normalization bounds."""
    if not (1 <= n <= mesh.n):
        raise ValueError(f"subset size {n} out of range for mesh with {mesh.n} points")
    idx = rng.permutation(mesh.n)[:n]
    return mesh.take(idx)


def grad_global_norm(grads: GradStore) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: GradStore, max_norm: float) -> float:
    """Scale gradients in place to a global norm cap; returns the pre-clip norm."""
    norm = grad_global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_frac: float = 0.05, min_lr: float = 1e-6) -> float:
    """Linear warmup then cosine decay to min_lr (clamped to the base rate)."""
    min_lr = min(min_lr, base_lr)
    warmup = max(1, round(total_steps * warmup_frac))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over named parameter tensors."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, items: list[tuple[str, Tensor]], grads: GradStore, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor in items:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(tensor.data))
            v = self.v.setdefault(name, np.zeros_like(tensor.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            tensor.data = tensor.data - lr * (update + self.weight_decay * tensor.data)


def _target_stats(meshes: list[MeshBatch]) -> tuple[np.ndarray, np.ndarray]:
    y = np.concatenate([m.targets for m in meshes], axis=0)
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def train(params: ModelParams, meshes: list[MeshBatch], tcfg: TrainConfig,
          val_mesh: MeshBatch | None = None, log_path: str | None = None,
          mode: str | None = None, tile_size: int | None = None) -> TrainResult:
    """Amortized training loop: sample, backward, clip, AdamW, cosine LR."""
    if not meshes:
        raise ValueError("dataset is empty")
    for m in meshes:
        if m.targets is None:
            raise ValueError("training meshes need targets")
    meshes = [m if m.bounds is not None else m.with_bounds(m.resolve_bounds()) for m in meshes]
    if val_mesh is None:
        val_mesh = meshes[0]

    params.coord_lo, params.coord_hi = meshes[0].resolve_bounds()
    if tcfg.standardize_targets:
        params.target_mean, params.target_std = _target_stats(meshes)
    mean = params.target_mean if params.target_mean is not None else 0.0
    std = params.target_std if params.target_std is not None else 1.0

    rng = make_rng(tcfg.seed)
    opt = AdamW(tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)
    items = param_items(params)

    def steps_for(mesh: MeshBatch) -> int:
        if tcfg.steps_per_epoch is not None:
            return tcfg.steps_per_epoch
        return max(1, math.ceil(mesh.n / tcfg.subset_size))

    total_steps = tcfg.epochs * sum(steps_for(m) for m in meshes)
    history: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_file:
        log_file.write("step,epoch,lr,train_loss,val_relL2\n")

    def fmt(v: float) -> str:
        return format(float(v), ".17g")

    def flush(rows: list[dict]) -> None:
        if not log_file:
            return
        for row in rows:
            val = "" if row["val_relL2"] is None else fmt(row["val_relL2"])
            log_file.write(f"{row['step']},{row['epoch']},{fmt(row['lr'])},"
                           f"{fmt(row['train_loss'])},{val}\n")
        log_file.flush()

    step = 0
    train_loss = float("nan")
    val_err: float | None = None
    try:
        for epoch in range(tcfg.epochs):
            epoch_rows: list[dict] = []
            for mesh in meshes:
                n_sub = min(tcfg.subset_size, mesh.n)
                for _ in range(steps_for(mesh)):
                    subset = amortized_sample(mesh, n_sub, rng)
                    y = (subset.targets - mean) / std
                    train_loss, grads = backward(params, subset, y, mode, tile_size,
                                                 checkpoint_tiles=tcfg.checkpoint_tiles)
                    if not math.isfinite(train_loss):
                        raise TrainingDivergedError(step)
                    clip_grads(grads, tcfg.grad_clip)
                    lr = cosine_lr(step, total_steps, tcfg.lr, tcfg.warmup_frac, tcfg.min_lr)
                    opt.step(items, grads, lr)
                    epoch_rows.append({"step": step, "epoch": epoch, "lr": lr,
                                       "train_loss": train_loss, "val_relL2": None})
                    step += 1
            last_epoch = epoch == tcfg.epochs - 1
            if val_mesh.targets is not None and (last_epoch or (epoch + 1) % tcfg.val_every == 0):
                cache = build_cache(params, val_mesh, chunk_size=tcfg.val_chunk_size)
                pred = decode_points(cache, params, val_mesh)
                val_err = rel_l2(pred, val_mesh.targets)
                epoch_rows[-1]["val_relL2"] = val_err
            history.extend(epoch_rows)
            flush(epoch_rows)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params=params, history=history,
                       final_train_loss=train_loss, final_val_rel_l2=val_err)
