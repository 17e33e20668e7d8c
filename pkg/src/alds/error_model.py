"""Relative spectral error of a compressed layer and its singular-value bound.

For a layer folded into ``W`` and split into column groups ``W_1 .. W_k``,
each truncated to rank ``j``, the relative operator-norm error satisfies::

    ||W_hat - W|| / ||W||  <=  sqrt(k) * max_i sigma_{j+1}(W_i) / sigma_1(W)

Only singular values enter the bound, so one SVD per group and per ``k``
suffices; :class:`SpectrumCache` stores those spectra and answers bound
queries in ``O(k)`` without further factorisations.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from alds.decompose import column_blocks, max_rank, partition_channels
from alds.tensor import SCHEMES, FoldedMatrix, fold

logger = logging.getLogger(__name__)


class SpectrumError(RuntimeError):
    """An SVD failed while building the spectrum cache."""


def _matrix(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, FoldedMatrix) else m, dtype=np.float64)


def spectral_norm(m) -> float:
    return float(np.linalg.norm(_matrix(m), 2))


def relative_error_exact(original, approx) -> float:
    """``||approx - original||_2 / ||original||_2`` via a dense SVD."""
    w = _matrix(original)
    w_hat = _matrix(approx)
    if w.shape != w_hat.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    norm = spectral_norm(w)
    if norm == 0.0:
        raise ValueError("relative error is undefined for a zero matrix")
    return spectral_norm(w_hat - w) / norm


@dataclass(frozen=True)
class LayerSpectrum:
    """Descending singular values of each channel group plus ``||W||_2``.

    Values below the numerical-rank threshold of the layer are stored as exact
    zeros so that lossless settings give a bound of exactly 0.
    """

    k: int
    scheme: int
    values: tuple[np.ndarray, ...]
    alpha1: float
    jmax: int

    def tail(self, j: int) -> np.ndarray:
        """``sigma_{j+1}`` of every group (0 beyond a group's rank)."""
        return np.array([v[j] if j < len(v) else 0.0 for v in self.values])


def error_bound(spectrum: LayerSpectrum, k: int, j: int) -> float:
    if spectrum.k != k:
        raise KeyError(f"spectrum was computed for k={spectrum.k}, not k={k}")
    if j < 1:
        raise ValueError("rank j must be >= 1")
    if spectrum.alpha1 == 0.0:
        return 0.0
    return float(np.sqrt(k) * spectrum.tail(j).max() / spectrum.alpha1)


def sumsq_bound(spectrum: LayerSpectrum, j: int) -> float:
    """The tighter ``sqrt(sum_i sigma_{i,j+1}^2) / sigma_1`` bound, kept for reports."""
    if spectrum.alpha1 == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(spectrum.tail(j) ** 2)) / spectrum.alpha1)


def _clean(values: np.ndarray, cutoff: float) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values[values <= cutoff] = 0.0
    return values


def layer_spectrum(weights, k: int, scheme: int = 0, alpha1: float | None = None,
                   svd=None) -> LayerSpectrum:
    """Spectrum of one layer for one ``(k, scheme)``; ``svd`` computes singular values."""
    svd = svd or (lambda m: np.linalg.svd(m, compute_uv=False))
    fm = fold(weights, scheme)
    folded, shape = fm.data, fm.origin_shape
    part = partition_channels(shape[1], k)
    values = [svd(folded[:, a:b]) for a, b in column_blocks(shape, part, scheme)]
    if alpha1 is None:
        alpha1 = float(values[0][0]) if k == 1 else float(svd(folded)[0])
    cutoff = alpha1 * max(folded.shape) * np.finfo(np.float64).eps
    values = tuple(_clean(v, cutoff) for v in values)
    return LayerSpectrum(k, scheme, values, float(alpha1), max_rank(shape, k, scheme))


@dataclass
class SpectrumCache:
    """Lookup table ``(layer, k, scheme) -> LayerSpectrum``.

    ``zero_layers`` lists layers whose weights are identically zero; they are
    left out of the table. ``svd_calls`` counts factorisations performed while
    building it.
    """

    entries: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    k_grid: tuple[int, ...] = (1,)
    schemes: tuple[int, ...] = (0,)
    zero_layers: frozenset = frozenset()
    svd_calls: int = 0
    _tables: dict = field(default_factory=dict, repr=False)

    def spectrum(self, layer: str, k: int, scheme: int = 0) -> LayerSpectrum:
        try:
            return self.entries[(layer, k, scheme)]
        except KeyError:
            raise KeyError(f"no spectrum for layer {layer!r}, k={k}, scheme {scheme}") from None

    def options(self, layer: str) -> list[tuple[int, int]]:
        """Feasible ``(k, scheme)`` pairs of a layer, ordered by k then scheme."""
        return sorted((k, s) for (name, k, s) in self.entries if name == layer)

    def bound(self, layer: str, k: int, j: int, scheme: int = 0) -> float:
        return error_bound(self.spectrum(layer, k, scheme), k, j)

    def bound_table(self, layer: str, k: int, scheme: int = 0) -> np.ndarray:
        """Bounds for ``j = 1 .. jmax`` (index ``j - 1``), non-increasing."""
        key = (layer, k, scheme)
        table = self._tables.get(key)
        if table is None:
            spec = self.spectrum(layer, k, scheme)
            table = np.array([error_bound(spec, k, j) for j in range(1, spec.jmax + 1)])
            table.setflags(write=False)
            self._tables[key] = table
        return table


def build_spectrum_cache(model, k_grid=(1,), schemes=(0,), max_workers: int = 1) -> SpectrumCache:
    """Run one SVD per channel group for every layer, feasible ``k`` and scheme.

    ``alpha1`` comes from the ``k = 1`` factorisation when 1 is in the grid,
    otherwise from one extra SVD of the whole folded matrix.
    """
    k_grid = tuple(sorted(set(int(k) for k in k_grid)))
    schemes = tuple(sorted(set(int(s) for s in schemes)))
    if not k_grid or min(k_grid) < 1:
        raise ValueError("k_grid must contain positive integers")
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s}")

    calls = 0
    lock = threading.Lock()

    def counted_svd(m):
        nonlocal calls
        with lock:
            calls += 1
        return np.linalg.svd(m, compute_uv=False)

    cache = SpectrumCache(k_grid=k_grid, schemes=schemes)
    zero = set()
    jobs = []
    for layer in model.layers:
        cache.shapes[layer.name] = tuple(layer.weights.shape)
        if not np.any(layer.weights):
            zero.add(layer.name)
            logger.warning("layer %s is all zeros; marked incompressible", layer.name)
            continue
        c = layer.weights.shape[1]
        for s in schemes:
            jobs.append((layer, s, [k for k in k_grid if k <= c]))

    def run(job):
        layer, s, ks = job
        out = {}
        try:
            alpha1 = None
            for k in ks:
                spec = layer_spectrum(layer.weights, k, s, alpha1, svd=counted_svd)
                alpha1 = spec.alpha1
                out[(layer.name, k, s)] = spec
        except np.linalg.LinAlgError as exc:
            raise SpectrumError(
                f"SVD failed for layer {layer.name!r}, k={k}, scheme {s}: {exc}"
            ) from exc
        return out

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for res in results:
        cache.entries.update(res)
    cache.zero_layers = frozenset(zero)
    cache.svd_calls = calls
    return cache
