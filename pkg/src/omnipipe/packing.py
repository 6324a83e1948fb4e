"""Sample packing with attention isolation.

Bins variable-length samples into fixed-capacity rows, records cumulative
sequence-length boundaries per bin, builds the block-causal mask those
boundaries imply, and provides a reference packed attention so isolation can
be proven against per-sample attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numkit import Tensor

PACK_POLICIES = ("first_fit", "first_fit_decreasing")


@dataclass(frozen=True)
class PackedBin:
    sample_ids: tuple[int, ...]
    cu_seqlens: tuple[int, ...]
    pad_len: int

    def lengths(self) -> tuple[int, ...]:
        return tuple(
            b - a for a, b in zip(self.cu_seqlens, self.cu_seqlens[1:])
        )


@dataclass(frozen=True)
class PackedBatch:
    capacity: int
    bins: tuple[PackedBin, ...]

    def __post_init__(self):
        for b in self.bins:
            if b.cu_seqlens[0] != 0 or any(
                y <= x for x, y in zip(b.cu_seqlens, b.cu_seqlens[1:])
            ):
                raise ContractError(f"cu_seqlens must rise from 0, got {b.cu_seqlens}")
            if b.cu_seqlens[-1] + b.pad_len != self.capacity:
                raise ContractError(
                    f"bin fill {b.cu_seqlens[-1]} + pad {b.pad_len} != "
                    f"capacity {self.capacity}"
                )

    @property
    def total_padding(self) -> int:
        return sum(b.pad_len for b in self.bins)

    def to_json(self) -> dict:
        return {
            "capacity": self.capacity,
            "bins": [
                {
                    "samples": list(b.sample_ids),
                    "cu_seqlens": list(b.cu_seqlens),
                    "pad": b.pad_len,
                }
                for b in self.bins
            ],
        }


def pack(lengths: list[int], capacity: int, policy: str = "first_fit") -> PackedBatch:
    """Place samples into capacity-sized bins with the first-fit heuristic.

    first_fit keeps arrival order; first_fit_decreasing visits samples longest
    first (ties in arrival order). Both are deterministic.
    """
    if capacity < 1:
        raise ContractError(f"capacity must be >= 1, got {capacity}")
    if policy not in PACK_POLICIES:
        raise ContractError(f"unknown policy {policy!r}, expected {PACK_POLICIES}")
    for i, length in enumerate(lengths):
        if length < 1:
            raise ContractError(f"sample {i} has non-positive length {length}")
        if length > capacity:
            raise ContractError(
                f"sample {i} length {length} exceeds capacity {capacity}"
            )
    order = list(range(len(lengths)))
    if policy == "first_fit_decreasing":
        order.sort(key=lambda i: (-lengths[i], i))
    bin_ids: list[list[int]] = []
    bin_free: list[int] = []
    for i in order:
        for b, free in enumerate(bin_free):
            if lengths[i] <= free:
                bin_ids[b].append(i)
                bin_free[b] -= lengths[i]
                break
        else:
            bin_ids.append([i])
            bin_free.append(capacity - lengths[i])
    bins = []
    for ids, free in zip(bin_ids, bin_free):
        cu = [0]
        for i in ids:
            cu.append(cu[-1] + lengths[i])
        bins.append(
            PackedBin(sample_ids=tuple(ids), cu_seqlens=tuple(cu), pad_len=free)
        )
    return PackedBatch(capacity=capacity, bins=tuple(bins))


@dataclass(frozen=True)
class IsolationMask:
    """Block-causal mask: position i attends to j iff both sit in the same
    packed segment and j <= i; padding positions attend to nothing."""

    capacity: int
    cu_seqlens: tuple[int, ...]
    matrix: np.ndarray

    @classmethod
    def from_cu_seqlens(cls, cu_seqlens, capacity: int) -> "IsolationMask":
        cu = tuple(int(v) for v in cu_seqlens)
        if cu[0] != 0 or any(y <= x for x, y in zip(cu, cu[1:])) or cu[-1] > capacity:
            raise ContractError(f"invalid cu_seqlens {cu} for capacity {capacity}")
        return cls(capacity=capacity, cu_seqlens=cu, matrix=mask_matrix(cu, capacity))


def mask_matrix(cu_seqlens, capacity: int) -> np.ndarray:
    """Explicit boolean capacity x capacity matrix for the given boundaries."""
    m = np.zeros((capacity, capacity), dtype=bool)
    for start, end in zip(cu_seqlens, cu_seqlens[1:]):
        n = end - start
        m[start:end, start:end] = np.tril(np.ones((n, n), dtype=bool))
    return m


def build_mask(batch: PackedBatch, bin_index: int) -> IsolationMask:
    if not 0 <= bin_index < len(batch.bins):
        raise ContractError(
            f"bin index {bin_index} out of range for {len(batch.bins)} bins"
        )
    b = batch.bins[bin_index]
    return IsolationMask.from_cu_seqlens(b.cu_seqlens, batch.capacity)


def packed_attention(bin_tokens: Tensor, mask: IsolationMask) -> Tensor:
    """Single-head scaled dot-product attention with identity projections.

    Disallowed pairs are excluded from the softmax; rows that may attend to
    nothing (padding) come out as zeros.
    """
    if bin_tokens.array.ndim != 2 or bin_tokens.shape[0] != mask.capacity:
        raise ShapeError(
            f"tokens shape {bin_tokens.shape} does not match mask capacity "
            f"{mask.capacity}"
        )
    x = bin_tokens.array
    d = x.shape[1]
    scores = (x @ x.T) / np.sqrt(d)
    allowed = mask.matrix
    neg = np.where(allowed, scores, -np.inf)
    row_max = np.max(neg, axis=1, keepdims=True)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    weights = np.where(allowed, np.exp(neg - safe_max), 0.0)
    denom = weights.sum(axis=1, keepdims=True)
    has_any = denom > 0
    probs = np.divide(weights, denom, out=np.zeros_like(weights), where=has_any)
    return Tensor(probs @ x)
