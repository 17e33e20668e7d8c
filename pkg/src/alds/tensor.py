"""Weight tensors, matrix folding and a reference convolution.

Weight tensors are plain ``numpy`` arrays of shape ``(f, c, k1, k2)``
(filters, input channels, kernel height, kernel width) held in float64.
Fully-connected layers are ``(f, c, 1, 1)``.

Folding reshapes a weight tensor into a matrix. Four schemes are supported;
in every scheme the input channel is the slowest-varying column index, so the
columns belonging to a contiguous channel range form a contiguous column
block. Index formulas (``a`` filter, ``ch`` channel, ``u``/``v`` kernel row
and column)::

    scheme 0:  f      x c*k1*k2   M[a,              (ch*k1 + u)*k2 + v] = W[a, ch, u, v]
    scheme 1:  f*k1   x c*k2      M[a*k1 + u,       ch*k2 + v]
    scheme 2:  f*k2   x c*k1      M[a*k2 + v,       ch*k1 + u]
    scheme 3:  f*k1*k2 x c        M[(a*k1 + u)*k2 + v, ch]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMES = (0, 1, 2, 3)

# axis order of the (f, c, k1, k2) tensor before the row/column split
_AXES = {
    0: (0, 1, 2, 3),
    1: (0, 2, 1, 3),
    2: (0, 3, 1, 2),
    3: (0, 2, 3, 1),
}
# how many leading axes of the permuted tensor go to the rows
_ROW_AXES = {0: 1, 1: 2, 2: 2, 3: 3}


def as_weight_tensor(weights) -> np.ndarray:
    """Validate and convert to a float64 ``(f, c, k1, k2)`` array."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, :, None, None]
    if w.ndim != 4 or min(w.shape) < 1:
        raise ValueError(f"expected a non-empty 4D weight tensor, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight tensor contains non-finite values")
    return w


def _check_scheme(scheme: int) -> int:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown flattening scheme {scheme!r}, expected one of {SCHEMES}")
    return int(scheme)


def folded_shape(shape, scheme: int) -> tuple[int, int]:
    f, c, k1, k2 = shape
    scheme = _check_scheme(scheme)
    return {
        0: (f, c * k1 * k2),
        1: (f * k1, c * k2),
        2: (f * k2, c * k1),
        3: (f * k1 * k2, c),
    }[scheme]


def columns_per_channel(shape, scheme: int) -> int:
    """Number of folded columns contributed by one input channel."""
    _, c, _, _ = shape
    return folded_shape(shape, scheme)[1] // c


@dataclass(frozen=True)
class FoldedMatrix:
    data: np.ndarray
    scheme: int
    origin_shape: tuple[int, int, int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def fold(weights, scheme: int = 0) -> FoldedMatrix:
    w = as_weight_tensor(weights)
    scheme = _check_scheme(scheme)
    rows, cols = folded_shape(w.shape, scheme)
    data = np.ascontiguousarray(w.transpose(_AXES[scheme])).reshape(rows, cols)
    return FoldedMatrix(data, scheme, tuple(int(s) for s in w.shape))


def unfold(matrix: FoldedMatrix) -> np.ndarray:
    """Inverse of :func:`fold`."""
    scheme = _check_scheme(matrix.scheme)
    shape = tuple(matrix.origin_shape)
    data = np.asarray(matrix.data)
    if data.size != int(np.prod(shape)):
        raise ValueError(
            f"matrix with {data.size} entries cannot be unfolded to shape {shape}"
        )
    if data.shape != folded_shape(shape, scheme):
        raise ValueError(
            f"matrix shape {data.shape} does not match scheme {scheme} for {shape}"
        )
    perm = _AXES[scheme]
    permuted = data.reshape([shape[a] for a in perm])
    return np.ascontiguousarray(permuted.transpose(np.argsort(perm)))


def _pair(value) -> tuple[int, int]:
    if np.isscalar(value):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def output_size(in_size, kernel, stride=1, padding=0) -> tuple[int, int]:
    m1, m2 = _pair(in_size)
    k1, k2 = _pair(kernel)
    s1, s2 = _pair(stride)
    p1, p2 = _pair(padding)
    return (m1 + 2 * p1 - k1) // s1 + 1, (m2 + 2 * p2 - k2) // s2 + 1


def im2col(x, kernel, stride=1, padding=0) -> tuple[np.ndarray, tuple[int, int]]:
    """Unfold a ``(c, m1, m2)`` input into the ``(c*k1*k2, p)`` feature matrix.

    Row ordering matches the scheme-0 column ordering, column ``q`` is the
    ``q``-th output pixel in row-major order. Returns the matrix and the
    output spatial size.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (c, m1, m2) input, got shape {x.shape}")
    k1, k2 = _pair(kernel)
    s1, s2 = _pair(stride)
    p1, p2 = _pair(padding)
    c = x.shape[0]
    o1, o2 = output_size(x.shape[1:], (k1, k2), (s1, s2), (p1, p2))
    if o1 < 1 or o2 < 1:
        raise ValueError("input too small for kernel/stride/padding")
    padded = np.pad(x, ((0, 0), (p1, p1), (p2, p2)))
    cols = np.empty((c, k1, k2, o1, o2))
    for u in range(k1):
        for v in range(k2):
            cols[:, u, v] = padded[:, u : u + s1 * o1 : s1, v : v + s2 * o2 : s2]
    return cols.reshape(c * k1 * k2, o1 * o2), (o1, o2)


def conv2d_reference(weights, x, stride=1, padding=0) -> np.ndarray:
    """Cross-correlation ``Y = W X`` via im2col, returns ``(f, o1, o2)``."""
    w = as_weight_tensor(weights)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[0] if x.ndim == 3 else '?'} channels, "
            f"layer expects {w.shape[1]}"
        )
    cols, (o1, o2) = im2col(x, w.shape[2:], stride, padding)
    out = fold(w, 0).data @ cols
    return out.reshape(w.shape[0], o1, o2)
