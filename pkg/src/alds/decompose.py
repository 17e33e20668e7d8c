"""Channel-sliced low-rank decomposition of a single layer.

A layer ``W`` of shape ``(f, c, k1, k2)`` is split along its input channels
into ``k`` contiguous groups. Each group is folded into a matrix and replaced
by a rank-``j`` factorisation ``U_i V_i`` where ``U_i`` has orthonormal
columns and ``V_i`` carries the singular values. For scheme 0 the result is
deployable as ``k`` parallel ``j x c_i x k1 x k2`` convolutions followed by a
single ``f x kj x 1 x 1`` convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from alds.tensor import (
    FoldedMatrix,
    as_weight_tensor,
    columns_per_channel,
    conv2d_reference,
    fold,
    folded_shape,
    unfold,
)


@dataclass(frozen=True)
class ChannelPartition:
    k: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def sizes(self) -> list[int]:
        return [stop - start for start, stop in self.ranges]


def partition_channels(c: int, k: int) -> ChannelPartition:
    """Split ``c`` channels into ``k`` contiguous non-empty groups.

    Group sizes differ by at most one; the ``c % k`` leading groups take the
    extra channel, so no group exceeds ``ceil(c / k)``.
    """
    if not 1 <= k <= c:
        raise ValueError(f"subspace count k={k} must satisfy 1 <= k <= c={c}")
    base, extra = divmod(c, k)
    ranges = []
    start = 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ChannelPartition(k, tuple(ranges))


def subspace_dims(shape, k: int, scheme: int) -> tuple[int, list[int]]:
    """Row count and per-group column counts of the folded groups."""
    f_eff = folded_shape(shape, scheme)[0]
    per_channel = columns_per_channel(shape, scheme)
    part = partition_channels(shape[1], k)
    return f_eff, [size * per_channel for size in part.sizes]


def max_rank(shape, k: int, scheme: int) -> int:
    """Largest rank ``j`` usable uniformly across all ``k`` groups."""
    f_eff, dims = subspace_dims(shape, k, scheme)
    return min(f_eff, min(dims))


def decomposed_size(shape, k: int, j: int, scheme: int) -> int:
    """Closed-form parameter count ``j * (k * f_eff + sum_i d_i)``."""
    f_eff = folded_shape(shape, scheme)[0]
    total_cols = folded_shape(shape, scheme)[1]
    return int(j) * (int(k) * f_eff + total_cols)


@dataclass(frozen=True)
class FactorPair:
    U: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def truncated_svd(matrix, j: int) -> FactorPair:
    """Best rank-``j`` factorisation ``U @ V`` with the singular values folded into ``V``."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a 2D matrix")
    if not 1 <= j <= min(m.shape):
        raise ValueError(f"rank j={j} outside [1, {min(m.shape)}] for matrix {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return FactorPair(np.ascontiguousarray(u[:, :j]), s[:j, None] * vt[:j])


@dataclass(frozen=True)
class SubspaceDecomposition:
    partition: ChannelPartition
    scheme: int
    rank: int
    factors: tuple[FactorPair, ...]
    origin_shape: tuple[int, int, int, int]

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def num_params(self) -> int:
        return sum(p.U.size + p.V.size for p in self.factors)


def column_blocks(shape, partition: ChannelPartition, scheme: int) -> list[tuple[int, int]]:
    per_channel = columns_per_channel(shape, scheme)
    return [(a * per_channel, b * per_channel) for a, b in partition.ranges]


def decompose_layer(weights, k: int, j: int, scheme: int = 0) -> SubspaceDecomposition:
    w = as_weight_tensor(weights)
    if k > w.shape[1] or k < 1:
        raise ValueError(f"k={k} is infeasible for a layer with {w.shape[1]} channels")
    part = partition_channels(w.shape[1], k)
    jmax = max_rank(w.shape, k, scheme)
    if not 1 <= j <= jmax:
        raise ValueError(
            f"rank j={j} infeasible for shape {w.shape}, k={k}, scheme {scheme} (max {jmax})"
        )
    folded = fold(w, scheme).data
    factors = tuple(
        truncated_svd(folded[:, a:b], j) for a, b in column_blocks(w.shape, part, scheme)
    )
    return SubspaceDecomposition(part, scheme, int(j), factors, tuple(w.shape))


def reconstruct_folded(decomp: SubspaceDecomposition) -> FoldedMatrix:
    blocks = [p.U @ p.V for p in decomp.factors]
    return FoldedMatrix(np.hstack(blocks), decomp.scheme, decomp.origin_shape)


def reconstruct(decomp: SubspaceDecomposition) -> np.ndarray:
    return unfold(reconstruct_folded(decomp))


def stacked_u(decomp: SubspaceDecomposition) -> np.ndarray:
    """The ``f x kj`` matrix of the trailing 1x1 convolution."""
    return np.hstack([p.U for p in decomp.factors])


def decomposed_forward(decomp: SubspaceDecomposition, x, stride=1, padding=0) -> np.ndarray:
    """Run the two-stage decomposed layer on a ``(c, m1, m2)`` input."""
    if decomp.scheme != 0:
        raise ValueError("decomposed execution is only defined for scheme 0")
    x = np.asarray(x, dtype=np.float64)
    f, c, k1, k2 = decomp.origin_shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ValueError(f"input must have {c} channels, got shape {x.shape}")
    maps = []
    for (start, stop), pair in zip(decomp.partition.ranges, decomp.factors):
        v_tensor = pair.V.reshape(decomp.rank, stop - start, k1, k2)
        maps.append(conv2d_reference(v_tensor, x[start:stop], stride, padding))
    stacked = np.concatenate(maps, axis=0)
    _, o1, o2 = stacked.shape
    out = stacked_u(decomp) @ stacked.reshape(stacked.shape[0], -1)
    return out.reshape(f, o1, o2)


def count_params(obj) -> int:
    if isinstance(obj, SubspaceDecomposition):
        return obj.num_params
    return int(np.asarray(obj).size)


def count_flops(obj, output_pixels: int | None) -> int:
    """Multiply-accumulate count of a layer or its decomposition.

    Every stage is a convolution evaluated at the layer's ``output_pixels``
    positions, so the count is parameters times output pixels; for scheme 0
    this is ``j*c*k1*k2*p + f*k*j*p``.
    """
    if output_pixels is None:
        raise ValueError("output_pixels metadata is required for FLOP accounting")
    if output_pixels < 1:
        raise ValueError("output_pixels must be positive")
    return count_params(obj) * int(output_pixels)
