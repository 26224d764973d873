"""Instrumented operation counters.

Every matmul / softmax kernel reports to the active counters, and the autodiff
tape reports each buffer it retains for the backward pass. This is the
measurement side of the cost model: predictions from `costmodel` are compared
against these counts exactly (multiply-adds, softmax elements) or within one
buffer granule (retained bytes).

Counting convention: a multiply-add is one fused multiply-accumulate, so a
P x Q @ Q x R matmul contributes P*Q*R madds. Bias adds, elementwise scalings
and reductions are not multiply-adds and are not counted here.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class RetainedBuffer:
    tag: str
    shape: tuple[int, ...]
    nbytes: int


@dataclass
class OpCounters:
    """Mutable tallies for one instrumented region."""

    madds: int = 0
    softmax_elements: int = 0
    madds_by_tag: dict[str, int] = field(default_factory=dict)
    softmax_by_tag: dict[str, int] = field(default_factory=dict)
    retained_bytes: int = 0
    retained: list[RetainedBuffer] = field(default_factory=list)

    def flops(self, softmax_cost: int = 4) -> int:
        """Time estimate under the 2-flops-per-madd convention."""
        return 2 * self.madds + softmax_cost * self.softmax_elements

    def retained_by_tag(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for buf in self.retained:
            out[buf.tag] = out.get(buf.tag, 0) + buf.nbytes
        return out

    def max_retained_rows(self, cols: int) -> int:
        """Largest row count among retained 2-D buffers with `cols` columns."""
        rows = [b.shape[0] for b in self.retained if len(b.shape) == 2 and b.shape[1] == cols]
        return max(rows, default=0)


_ACTIVE: list[OpCounters] = []


@contextmanager
def count_ops():
    """Collect kernel counts for the enclosed region.

    Nesting is allowed; every active counter sees every event.
    """
    counters = OpCounters()
    _ACTIVE.append(counters)
    try:
        yield counters
    finally:
        _ACTIVE.remove(counters)


def counting_active() -> bool:
    return bool(_ACTIVE)


def record_matmul(p: int, q: int, r: int, tag: str) -> None:
    if not _ACTIVE:
        return
    n = p * q * r
    for c in _ACTIVE:
        c.madds += n
        c.madds_by_tag[tag] = c.madds_by_tag.get(tag, 0) + n


def record_softmax(elements: int, tag: str) -> None:
    if not _ACTIVE:
        return
    for c in _ACTIVE:
        c.softmax_elements += elements
        c.softmax_by_tag[tag] = c.softmax_by_tag.get(tag, 0) + elements


def record_retained(shape: tuple[int, ...], nbytes: int, tag: str) -> None:
    if not _ACTIVE:
        return
    for c in _ACTIVE:
        c.retained_bytes += nbytes
        c.retained.append(RetainedBuffer(tag, shape, nbytes))
