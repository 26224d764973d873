"""Reverse-mode differentiation for the fixed model graph.

A small tape engine over numpy arrays: each op builds a `Tensor` node holding
its value and a closure that routes the output gradient to its parents.
`backward()` walks the tape in reverse topological order. Only the ops the
model graph needs exist; there is no broadcasting zoo.

Gradient checkpointing is first-class: `checkpoint` re-runs a subgraph during
the backward sweep instead of retaining its intermediates, and the two tile
ops (`tile_checkpoint_sum`, `tile_checkpoint_map`) run a per-row-tile subgraph
while accumulating into a single running buffer, so nothing proportional to
the full row count times the tile-local width is ever kept on the tape.

Every tape node reports its buffer to the active `counters` registry, which is
how the memory claims of the tiled path are verified against the cost model.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import counters, linalg
from .errors import DegenerateTargetError, ShapeError

_GRAD_STACK: list[bool] = [True]
_IN_RECOMPUTE: list[bool] = [False]

_GELU_K = linalg.GELU_K
_GELU_A = linalg.GELU_A


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


@contextmanager
def no_grad():
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


@contextmanager
def enable_grad():
    _GRAD_STACK.append(True)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


class Tensor:
    """Array value plus optional tape node state."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "tag")

    def __init__(self, data, requires_grad: bool = False, tag: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.tag = tag

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tag={self.tag!r}, requires_grad={self.requires_grad})"

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _acc_rows(self, lo: int, hi: int, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[lo:hi] += g

    def _acc_cols(self, lo: int, hi: int, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[:, lo:hi] += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse sweep from this node; accumulates into `.grad` of leaves."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self._acc(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            # grad can stay None when an upstream op passed nothing down
            # (e.g. a loss at its exact minimum); there is nothing to push.
            if node._backward is not None and node.grad is not None:
                node._backward()


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, tag="param")


def constant(data) -> Tensor:
    return Tensor(data)


def _node(data: np.ndarray, parents: Sequence[Tensor], tag: str) -> Tensor:
    out = Tensor(data, tag=tag)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        if not _IN_RECOMPUTE[-1]:
            counters.record_retained(data.shape, data.nbytes, tag)
    return out


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor, tag: str = "matmul", scale: float | None = None) -> Tensor:
    data = linalg.matmul(a.data, b.data, tag)
    if scale is not None:
        data *= scale
    out = _node(data, (a, b), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad if scale is None else out.grad * scale
            if a.requires_grad:
                a._acc(linalg.matmul_nt(g, b.data, tag + ".bwd"))
            if b.requires_grad:
                b._acc(linalg.matmul_tn(a.data, g, tag + ".bwd"))
        out._backward = _bw
    return out


def matmul_tn(a: Tensor, b: Tensor, tag: str = "matmul_tn") -> Tensor:
    """a.T @ b, the aggregation hot path; transpose is a strided view."""
    data = linalg.matmul_tn(a.data, b.data, tag)
    out = _node(data, (a, b), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._acc(linalg.matmul_nt(b.data, g, tag + ".bwd"))
            if b.requires_grad:
                b._acc(linalg.matmul(a.data, g, tag + ".bwd"))
        out._backward = _bw
    return out


def matmul_nt(a: Tensor, b: Tensor, tag: str = "matmul_nt", scale: float | None = None) -> Tensor:
    data = linalg.matmul_nt(a.data, b.data, tag)
    if scale is not None:
        data *= scale
    out = _node(data, (a, b), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad if scale is None else out.grad * scale
            if a.requires_grad:
                a._acc(linalg.matmul(g, b.data, tag + ".bwd"))
            if b.requires_grad:
                b._acc(linalg.matmul_tn(g, a.data, tag + ".bwd"))
        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None, tag: str = "linear") -> Tensor:
    """x @ w + b fused into one tape node; b may be None (bias-free mode)."""
    data = linalg.matmul(x.data, w.data, tag)
    if b is not None:
        data += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _node(data, parents, tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if x.requires_grad:
                x._acc(linalg.matmul_nt(g, w.data, tag + ".bwd"))
            if w.requires_grad:
                w._acc(linalg.matmul_tn(x.data, g, tag + ".bwd"))
            if b is not None and b.requires_grad:
                b._acc(g.sum(axis=0))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor, tag: str = "add") -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b), tag)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._acc(out.grad)
            if b.requires_grad:
                b._acc(out.grad)
        out._backward = _bw
    return out


def mul_scalar(t: Tensor, c: float, tag: str = "scale") -> Tensor:
    out = _node(t.data * c, (t,), tag)
    if out.requires_grad:
        def _bw():
            t._acc(out.grad * c)
        out._backward = _bw
    return out


def rowdiv(t: Tensor, v: Tensor, tag: str = "rowdiv") -> Tensor:
    """t / v per row: out[j, k] = t[j, k] / v[j]."""
    data = t.data / v.data[:, None]
    out = _node(data, (t, v), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if t.requires_grad:
                t._acc(g / v.data[:, None])
            if v.requires_grad:
                v._acc(-(g * data).sum(axis=1) / v.data)
        out._backward = _bw
    return out


def coldiv(t: Tensor, v: Tensor, tag: str = "coldiv") -> Tensor:
    """t / v per column: out[i, j] = t[i, j] / v[j]."""
    data = t.data / v.data[None, :]
    out = _node(data, (t, v), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if t.requires_grad:
                t._acc(g / v.data[None, :])
            if v.requires_grad:
                v._acc(-(g * data).sum(axis=0) / v.data)
        out._backward = _bw
    return out


def colsum(t: Tensor, tag: str = "colsum") -> Tensor:
    out = _node(t.data.sum(axis=0), (t,), tag)
    if out.requires_grad:
        def _bw():
            t._acc(np.broadcast_to(out.grad, t.data.shape))
        out._backward = _bw
    return out


def softmax_rows(t: Tensor, tag: str = "softmax") -> Tensor:
    y = linalg.softmax_rows(t.data, tag)
    out = _node(y, (t,), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            t._acc(y * (g - (g * y).sum(axis=1, keepdims=True)))
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6,
               tag: str = "layer_norm") -> Tensor:
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = _node(xhat * gain.data + shift.data, (x, gain, shift), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if gain.requires_grad:
                gain._acc((g * xhat).sum(axis=0))
            if shift.requires_grad:
                shift._acc(g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                x._acc(inv_std * (dxhat
                                  - dxhat.mean(axis=1, keepdims=True)
                                  - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)))
        out._backward = _bw
    return out


def gelu(t: Tensor, tag: str = "gelu") -> Tensor:
    """GELU, tanh form."""
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_K * (x + _GELU_A * x2 * x))
    out = _node(0.5 * x * (1.0 + th), (t,), tag)
    if out.requires_grad:
        def _bw():
            du = _GELU_K * (1.0 + 3.0 * _GELU_A * x2)
            t._acc(out.grad * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# structure ops


def row_slice(t: Tensor, lo: int, hi: int, tag: str = "row_slice") -> Tensor:
    data = np.ascontiguousarray(t.data[lo:hi])
    out = _node(data, (t,), tag)
    if out.requires_grad:
        def _bw():
            t._acc_rows(lo, hi, out.grad)
        out._backward = _bw
    return out


def concat_rows(parts: Sequence[Tensor], tag: str = "concat_rows") -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    out = _node(data, tuple(parts), tag)
    if out.requires_grad:
        heights = [p.data.shape[0] for p in parts]
        def _bw():
            lo = 0
            for p, h in zip(parts, heights):
                if p.requires_grad:
                    p._acc(out.grad[lo:lo + h])
                lo += h
        out._backward = _bw
    return out


def col_slice(t: Tensor, lo: int, hi: int, tag: str = "col_slice") -> Tensor:
    data = np.ascontiguousarray(t.data[:, lo:hi])
    out = _node(data, (t,), tag)
    if out.requires_grad:
        def _bw():
            t._acc_cols(lo, hi, out.grad)
        out._backward = _bw
    return out


def col_vector(t: Tensor, idx: int, tag: str = "col_vector") -> Tensor:
    """Extract one column as a 1-D vector."""
    data = np.ascontiguousarray(t.data[:, idx])
    out = _node(data, (t,), tag)
    if out.requires_grad:
        def _bw():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad[:, idx] += out.grad
        out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor], tag: str = "concat_cols") -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    out = _node(data, tuple(parts), tag)
    if out.requires_grad:
        widths = [p.data.shape[1] for p in parts]
        def _bw():
            lo = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p._acc(out.grad[:, lo:lo + w])
                lo += w
        out._backward = _bw
    return out


def append_col(mat: Tensor, vec: Tensor, tag: str = "append_col") -> Tensor:
    """Pack [mat | vec] into one matrix (used to carry (s_raw, d) as one value)."""
    m, c = mat.data.shape
    data = np.empty((m, c + 1), dtype=mat.data.dtype)
    data[:, :c] = mat.data
    data[:, c] = vec.data
    out = _node(data, (mat, vec), tag)
    if out.requires_grad:
        def _bw():
            if mat.requires_grad:
                mat._acc(out.grad[:, :c])
            if vec.requires_grad:
                vec._acc(out.grad[:, c])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# loss


def rel_l2_loss(pred: Tensor, target: np.ndarray, tag: str = "rel_l2") -> Tensor:
    """||pred - target||_F / ||target||_F as a scalar tape node."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeError(f"rel_l2_loss: prediction {pred.data.shape} vs target {target.shape}")
    denom = float(np.sqrt((target ** 2).sum()))
    if denom == 0.0:
        raise DegenerateTargetError("rel_l2_loss: target field has zero norm")
    diff = pred.data - target
    num = float(np.sqrt((diff ** 2).sum()))
    out = _node(np.float64(num / denom), (pred,), tag)
    if out.requires_grad:
        def _bw():
            if num > 0.0:
                pred._acc(float(out.grad) * diff / (num * denom))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor, tag: str = "checkpoint") -> Tensor:
    """Run fn without taping; recompute it with the tape during backward.

    fn must be pure and return a single Tensor. All tensors fn reads must be
    passed as explicit inputs so their gradients are routed.
    """
    datas = [t.data for t in inputs]
    with no_grad():
        out_data = fn(*[Tensor(d) for d in datas]).data
    out = _node(out_data, inputs, tag)
    if out.requires_grad:
        def _bw():
            _IN_RECOMPUTE.append(True)
            try:
                with enable_grad():
                    leaves = [Tensor(d, requires_grad=True) for d in datas]
                    fn(*leaves).backward(seed=out.grad)
            finally:
                _IN_RECOMPUTE.pop()
            for t, leaf in zip(inputs, leaves):
                if t.requires_grad and leaf.grad is not None:
                    t._acc(leaf.grad)
        out._backward = _bw
    return out


def _check_ranges(ranges: Sequence[tuple[int, int]], n: int) -> None:
    pos = 0
    for lo, hi in ranges:
        if lo != pos or hi <= lo:
            raise ShapeError(f"tile ranges must partition [0, {n}) in order, got {list(ranges)}")
        pos = hi
    if pos != n:
        raise ShapeError(f"tile ranges must partition [0, {n}) in order, got {list(ranges)}")


def tile_checkpoint_sum(fn: Callable[..., Tensor], main: Tensor,
                        ranges: Sequence[tuple[int, int]],
                        shared: Sequence[Tensor] = (),
                        tag: str = "tile_sum") -> Tensor:
    """Sum of fn(main[lo:hi], *shared) over row tiles, checkpointed per tile.

    The forward pass keeps a single running accumulator; per-tile values are
    transient and recomputed tile-by-tile during backward. Gradients from
    every tile accumulate into `main` rows and into each shared tensor.
    """
    _check_ranges(ranges, main.data.shape[0])
    shared_datas = [s.data for s in shared]
    acc: np.ndarray | None = None
    with no_grad():
        for lo, hi in ranges:
            part = fn(Tensor(main.data[lo:hi]), *[Tensor(d) for d in shared_datas]).data
            if acc is None:
                acc = part.copy()
            else:
                acc += part
    out = _node(acc, (main, *shared), tag)
    if out.requires_grad:
        def _bw():
            g = out.grad
            for lo, hi in ranges:
                _IN_RECOMPUTE.append(True)
                try:
                    with enable_grad():
                        leaf_main = Tensor(main.data[lo:hi], requires_grad=True)
                        leaf_shared = [Tensor(d, requires_grad=True) for d in shared_datas]
                        fn(leaf_main, *leaf_shared).backward(seed=g)
                finally:
                    _IN_RECOMPUTE.pop()
                if main.requires_grad and leaf_main.grad is not None:
                    main._acc_rows(lo, hi, leaf_main.grad)
                for s, leaf in zip(shared, leaf_shared):
                    if s.requires_grad and leaf.grad is not None:
                        s._acc(leaf.grad)
        out._backward = _bw
    return out


def tile_checkpoint_map(fn: Callable[..., Tensor], main: Tensor,
                        ranges: Sequence[tuple[int, int]],
                        shared: Sequence[Tensor] = (),
                        tag: str = "tile_map") -> Tensor:
    """Row-aligned map of fn over tiles of `main`, checkpointed per tile.

    fn(main[lo:hi], *shared) must return hi-lo rows; outputs land in one
    preallocated buffer, so per-tile results are never separately retained.
    """
    n = main.data.shape[0]
    _check_ranges(ranges, n)
    shared_datas = [s.data for s in shared]
    out_data: np.ndarray | None = None
    with no_grad():
        for lo, hi in ranges:
            part = fn(Tensor(main.data[lo:hi]), *[Tensor(d) for d in shared_datas]).data
            if out_data is None:
                out_data = np.empty((n, part.shape[1]), dtype=part.dtype)
            out_data[lo:hi] = part
    out = _node(out_data, (main, *shared), tag)
    if out.requires_grad:
        def _bw():
            for lo, hi in ranges:
                _IN_RECOMPUTE.append(True)
                try:
                    with enable_grad():
                        leaf_main = Tensor(main.data[lo:hi], requires_grad=True)
                        leaf_shared = [Tensor(d, requires_grad=True) for d in shared_datas]
                        fn(leaf_main, *leaf_shared).backward(seed=out.grad[lo:hi])
                finally:
                    _IN_RECOMPUTE.pop()
                if main.requires_grad and leaf_main.grad is not None:
                    main._acc_rows(lo, hi, leaf_main.grad)
                for s, leaf in zip(shared, leaf_shared):
                    if s.requires_grad and leaf.grad is not None:
                        s._acc(leaf.grad)
        out._backward = _bw
    return out
