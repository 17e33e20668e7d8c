"""Reference allocators: constant per-layer ratio and constant retained energy."""

from __future__ import annotations

import numpy as np

from alds.allocator import (
    InfeasibleBudget,
    _build_plan,
    _Problem,
    _resolve_cache,
    _total_params,
    param_budget,
)
from alds.decompose import max_rank


def _constant_ratio(method, model, cr, fixed_k, cache):
    cache = _resolve_cache(model, cache, sorted(set(range(1, fixed_k + 1))), (0,))
    problem = _Problem(cache, None, (0,))
    budget = param_budget(cr, _total_params(problem))
    assign, ranks, flags = {}, {}, []
    for name in problem.names:
        if name not in problem.options or cr == 0.0:
            continue
        opt = problem.clamp(name, fixed_k, 0)
        k = opt[0]
        layer_budget = (1.0 - cr) * problem.original(name)
        j = int(np.floor(round(layer_budget, 9) / problem.step(name, opt)))
        j = min(j, max_rank(problem.shapes[name], k, 0))
        if j < 1:
            flags.append(f"{name}: too small for rank 1 at CR={cr}, kept dense")
            continue
        assign[name] = opt
        ranks[name] = j
    return _build_plan(method, problem, assign, ranks, cr, budget, flags=flags)


def svd_constant(model, cr: float, cache=None):
    """Same compression ratio in every layer: ``k = 1`` and the largest fitting rank.

    A ratio of 0 keeps every layer dense (lossless).
    """
    return _constant_ratio("svd", model, cr, 1, cache)


def alds_simple(model, cr: float, fixed_k: int, cache=None):
    """Constant per-layer ratio with ``fixed_k`` channel groups; ``fixed_k=1`` is :func:`svd_constant`."""
    method = "svd" if fixed_k == 1 else f"alds-simple-k{fixed_k}"
    return _constant_ratio(method, model, cr, fixed_k, cache)


def energy_table(cache, name: str) -> np.ndarray:
    """Retained-energy fraction for ``j = 1 .. jmax`` of the undivided layer."""
    spec = cache.spectrum(name, 1, 0)
    sq = spec.values[0] ** 2
    frac = np.cumsum(sq) / sq.sum()
    frac = np.minimum(frac, 1.0)
    frac[-1] = 1.0
    return frac[: spec.jmax]


def ranks_for_energy(cache, names, eta: float) -> dict:
    """Smallest rank per layer retaining at least ``eta`` of the squared singular values."""
    out = {}
    for name in names:
        frac = energy_table(cache, name)
        idx = int(np.searchsorted(frac, eta, side="left"))
        out[name] = min(idx, len(frac) - 1) + 1
    return out


def svd_energy(model, cr: float, cache=None):
    """Largest common retained-energy fraction whose ranks fit the budget.

    Candidate fractions are the per-layer cumulative energies, so the search
    is exact over the discrete set.
    """
    cache = _resolve_cache(model, cache, (1,), (0,))
    problem = _Problem(cache, (1,), (0,))
    budget = param_budget(cr, _total_params(problem))
    available = budget - problem.dense_params
    names = problem.free
    if not names:
        return _build_plan("svd-energy", problem, {}, {}, cr, budget, level=1.0)
    steps = {n: problem.step(n, (1, 0)) for n in names}
    cands = np.unique(np.concatenate([energy_table(cache, n) for n in names]))

    def size(eta):
        ranks = ranks_for_energy(cache, names, eta)
        return sum(ranks[n] * steps[n] for n in names)

    if size(cands[0]) > available:
        raise InfeasibleBudget(f"compression ratio {cr} is infeasible for svd-energy")
    lo, hi = 0, len(cands) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if size(cands[mid]) <= available:
            lo = mid
        else:
            hi = mid - 1
    eta = float(cands[lo])
    ranks = ranks_for_energy(cache, names, eta)
    assign = {n: (1, 0) for n in names}
    return _build_plan("svd-energy", problem, assign, ranks, cr, budget, level=eta)

