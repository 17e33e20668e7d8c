"""Global allocation of per-layer subspace counts and ranks.

The allocator minimises the largest per-layer error bound subject to the
decomposed network fitting ``floor((1 - CR) * |theta|)`` parameters. It
alternates two steps until the assignment stops changing:

* global step: with every layer's ``(k, scheme)`` fixed, pick ranks so that
  all layers sit at one common error level, the smallest level whose induced
  size fits the budget;
* local step: with every layer's parameter budget fixed, re-pick the
  ``(k, scheme, j)`` triple with the smallest bound inside that budget.

Several random initialisations are tried and the cheapest result is kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from alds.decompose import decomposed_size
from alds.error_model import SpectrumCache, build_spectrum_cache, sumsq_bound

logger = logging.getLogger(__name__)


class InfeasibleBudget(ValueError):
    """The requested compression ratio cannot be met even with rank 1 everywhere."""


def param_budget(cr: float, total_params: int) -> int:
    if not 0.0 <= cr < 1.0:
        raise ValueError(f"compression ratio must lie in [0, 1), got {cr}")
    # rounding guards against (1 - cr) * n landing a hair below an integer
    return int(math.floor(round((1.0 - cr) * total_params, 9)))


@dataclass(frozen=True)
class LayerAssignment:
    """Per-layer outcome; ``k``/``j``/``scheme`` are None for layers kept dense."""

    name: str
    k: int | None
    j: int | None
    scheme: int | None
    params: int
    original_params: int
    bound: float
    bound_sumsq: float = 0.0

    @property
    def compressed(self) -> bool:
        return self.k is not None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "k": self.k,
            "j": self.j,
            "scheme": self.scheme,
            "params": self.params,
            "original_params": self.original_params,
            "bound": self.bound,
            "bound_sumsq": self.bound_sumsq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LayerAssignment:
        return cls(**d)


@dataclass(frozen=True)
class CompressionPlan:
    method: str
    target_cr: float
    layers: tuple[LayerAssignment, ...]
    total_params: int
    budget: int
    level: float | None = None
    seeds: tuple[dict, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def achieved_params(self) -> int:
        return sum(a.params for a in self.layers)

    @property
    def cost(self) -> float:
        return max((a.bound for a in self.layers), default=0.0)

    @property
    def cr_p(self) -> float:
        return 1.0 - self.achieved_params / self.total_params

    @property
    def bounds(self) -> list[float]:
        return [a.bound for a in self.layers]

    def layer(self, name: str) -> LayerAssignment:
        for a in self.layers:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "target_cr": self.target_cr,
            "total_params": self.total_params,
            "budget": self.budget,
            "achieved_params": self.achieved_params,
            "cost": self.cost,
            "level": self.level,
            "flags": list(self.flags),
            "seeds": [dict(s) for s in self.seeds],
            "layers": [a.to_dict() for a in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CompressionPlan:
        return cls(
            method=d["method"],
            target_cr=d["target_cr"],
            layers=tuple(LayerAssignment.from_dict(a) for a in d["layers"]),
            total_params=d["total_params"],
            budget=d["budget"],
            level=d.get("level"),
            seeds=tuple(d.get("seeds", ())),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class AldsConfig:
    n_seed: int = 15
    k_max: int = 5
    schemes: tuple[int, ...] = (0,)
    max_em_iters: int = 50
    rng_seed: int = 0
    k_grid: tuple[int, ...] | None = None
    # additionally start once from every constant-k assignment
    uniform_inits: bool = True

    def __post_init__(self):
        if self.n_seed < 1:
            raise ValueError("n_seed must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")

    @property
    def grid(self) -> tuple[int, ...]:
        if self.k_grid is not None:
            return tuple(sorted(set(self.k_grid)))
        return tuple(range(1, self.k_max + 1))


# --------------------------------------------------------------------------
# problem view over the spectrum cache


def _step(shape, k: int, scheme: int) -> int:
    """Parameters added per unit of rank."""
    return decomposed_size(shape, k, 1, scheme)


class _Problem:
    """Allocatable layers, their options and the dense remainder."""

    def __init__(self, cache: SpectrumCache, k_grid=None, schemes=None):
        self.cache = cache
        self.names = list(cache.shapes)
        self.shapes = dict(cache.shapes)
        self.options = {}
        self.dense = []
        for name in self.names:
            shape = self.shapes[name]
            original = int(np.prod(shape))
            opts = [
                (k, s)
                for k, s in cache.options(name)
                if (k_grid is None or k in k_grid) and (schemes is None or s in schemes)
            ]
            # layers that cannot shrink under any option stay dense
            if name in cache.zero_layers or not opts or all(
                _step(shape, k, s) > original for k, s in opts
            ):
                self.dense.append(name)
            else:
                self.options[name] = opts
        self.free = [n for n in self.names if n in self.options]

    def original(self, name: str) -> int:
        return int(np.prod(self.shapes[name]))

    @property
    def dense_params(self) -> int:
        return sum(self.original(n) for n in self.dense)

    def table(self, name: str, option) -> np.ndarray:
        k, s = option
        return self.cache.bound_table(name, k, s)

    def step(self, name: str, option) -> int:
        k, s = option
        return _step(self.shapes[name], k, s)

    def clamp(self, name: str, k: int, scheme: int):
        """Largest available subspace count <= k (falling back to the smallest)."""
        opts = self.options[name]
        cands = [o for o in opts if o[1] == scheme] or opts
        below = [o for o in cands if o[0] <= k]
        return max(below) if below else min(cands)

    def smallest_option(self, name: str):
        return min(self.options[name], key=lambda o: (self.step(name, o), o))


def _smallest_rank_at(table: np.ndarray, level: float) -> int | None:
    """Smallest ``j`` with ``table[j-1] <= level`` (tables are non-increasing)."""
    idx = int(np.searchsorted(-table, -level, side="left"))
    return idx + 1 if idx < len(table) else None


def _global_step(problem: _Problem, assign: dict, available: int):
    """Exact min-max rank allocation for fixed options.

    Every attainable cost is an entry of some bound table, so the search runs
    over those candidate levels; the induced size is monotone in the level.
    """
    names = [n for n in problem.free if n in assign]
    tables = [problem.table(n, assign[n]) for n in names]
    steps = [problem.step(n, assign[n]) for n in names]
    if not names:
        return {}, 0.0
    floor_level = max(t[-1] for t in tables)
    cands = np.unique(np.concatenate(tables))
    cands = cands[cands >= floor_level]

    def ranks_at(level):
        return [_smallest_rank_at(t, level) for t in tables]

    def size_at(level):
        return sum(j * st for j, st in zip(ranks_at(level), steps))

    if size_at(cands[-1]) > available:
        raise InfeasibleBudget(
            f"budget of {available} parameters cannot hold rank-1 decompositions "
            f"({size_at(cands[-1])} needed)"
        )
    lo, hi = 0, len(cands) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if size_at(cands[mid]) <= available:
            hi = mid
        else:
            lo = mid + 1
    level = float(cands[lo])
    return dict(zip(names, ranks_at(level))), level


def _local_choice(problem: _Problem, name: str, budget: int):
    """Best ``(option, j, bound)`` within ``budget``; ties -> smaller k, scheme, j."""
    best = None
    for opt in problem.options[name]:
        table = problem.table(name, opt)
        jcap = min(len(table), budget // problem.step(name, opt))
        if jcap < 1:
            continue
        b = float(table[jcap - 1])
        j = _smallest_rank_at(table, b)
        if best is None or b < best[2]:
            best = (opt, j, b)
    return best


def _resolve_cache(model, cache, k_grid, schemes):
    if cache is None:
        if model is None:
            raise ValueError("either a model or a spectrum cache is required")
        cache = build_spectrum_cache(model, k_grid, schemes)
    return cache


def _total_params(problem: _Problem) -> int:
    return sum(problem.original(n) for n in problem.names)


def _build_plan(method, problem, assign, ranks, cr, budget, level=None, seeds=(), flags=()):
    layers = []
    for name in problem.names:
        original = problem.original(name)
        if name in ranks and ranks[name] is not None:
            k, s = assign[name]
            j = ranks[name]
            spec = problem.cache.spectrum(name, k, s)
            layers.append(LayerAssignment(
                name, k, j, s,
                decomposed_size(problem.shapes[name], k, j, s),
                original,
                float(problem.table(name, (k, s))[j - 1]),
                sumsq_bound(spec, j),
            ))
        else:
            layers.append(LayerAssignment(name, None, None, None, original, original, 0.0, 0.0))
    plan = CompressionPlan(method, float(cr), tuple(layers), _total_params(problem), budget,
                           level, tuple(seeds), tuple(flags))
    return plan


# --------------------------------------------------------------------------
# public API


def optimal_ranks(cache: SpectrumCache, ks, cr: float, total_params: int | None = None):
    """Rank-equalising global step.

    ``ks`` lists, per layer in cache order, a subspace count, a ``(k, scheme)``
    pair, or None for a layer kept dense. Returns ``(ranks, level)`` where
    ``ranks`` aligns with ``ks`` (None for dense layers) and ``level`` is the
    common error level reached.
    """
    problem = _Problem(cache)
    names = problem.names
    if len(ks) != len(names):
        raise ValueError(f"expected {len(names)} entries in ks, got {len(ks)}")
    total = _total_params(problem) if total_params is None else int(total_params)
    assign = {}
    dense = 0
    for name, k in zip(names, ks):
        if k is None or name not in problem.options:
            dense += problem.original(name)
            continue
        opt = tuple(k) if isinstance(k, (tuple, list)) else (int(k), 0)
        if opt not in problem.options[name]:
            raise ValueError(f"option {opt} is infeasible for layer {name!r}")
        assign[name] = opt
    available = param_budget(cr, total) - dense
    ranks, level = _global_step(problem, assign, available)
    return [ranks.get(n) for n in names], level


def optimal_subspaces(cache: SpectrumCache, layer: str, budget: int, k_grid=None, schemes=None):
    """Local step for one layer: ``(k, j, scheme)`` with the smallest bound within ``budget``.

    Returns None when no option fits (the layer is incompressible at this budget).
    """
    problem = _Problem(cache, k_grid, schemes)
    if layer not in problem.options:
        return None
    choice = _local_choice(problem, layer, int(budget))
    if choice is None:
        return None
    (k, s), j, _ = choice
    return k, j, s


def _run_seed(problem: _Problem, init: dict, available: int, max_iters: int):
    assign = dict(init)
    trace = []
    seen = {tuple(sorted(assign.items()))}
    converged = False
    iters = 0
    while iters < max_iters:
        iters += 1
        ranks, level = _global_step(problem, assign, available)
        trace.append(("global", _cost(problem, assign, ranks)))
        new_assign = {}
        new_ranks = {}
        for name in assign:
            b = ranks[name] * problem.step(name, assign[name])
            opt, j, _ = _local_choice(problem, name, b)
            new_assign[name] = opt
            new_ranks[name] = j
        trace.append(("local", _cost(problem, new_assign, new_ranks)))
        if new_assign == assign:
            converged = True
            break
        key = tuple(sorted(new_assign.items()))
        assign = new_assign
        if key in seen:
            break
        seen.add(key)
    if not converged:
        # finish on a global step so the spare budget is spent
        ranks, level = _global_step(problem, assign, available)
        trace.append(("global", _cost(problem, assign, ranks)))
    return assign, ranks, level, trace, iters, converged


def _cost(problem: _Problem, assign: dict, ranks: dict) -> float:
    return max(
        (float(problem.table(n, assign[n])[ranks[n] - 1]) for n in assign),
        default=0.0,
    )


def run_alds(model, cr: float, config: AldsConfig | None = None, cache: SpectrumCache | None = None):
    """Multi-seed alternating minimisation of the largest per-layer error bound."""
    config = config or AldsConfig()
    grid = config.grid
    cache = _resolve_cache(model, cache, grid, config.schemes)
    problem = _Problem(cache, grid, config.schemes)
    total = _total_params(problem)
    budget = param_budget(cr, total)
    available = budget - problem.dense_params

    inits = []
    for i in range(config.n_seed):
        rng = np.random.default_rng([config.rng_seed, i])
        init = {}
        for name in problem.free:
            opts = problem.options[name]
            init[name] = opts[int(rng.integers(len(opts)))]
        inits.append((f"random-{i}", init))
    if config.uniform_inits:
        for k in grid:
            init = {n: problem.clamp(n, k, min(config.schemes)) for n in problem.free}
            inits.append((f"uniform-k{k}", init))

    best = None
    seeds = []
    for label, init in inits:
        try:
            _global_step(problem, init, available)
        except InfeasibleBudget:
            # fall back to the cheapest rank-1 footprint per layer
            init = {n: problem.smallest_option(n) for n in problem.free}
            label += "/fallback"
            try:
                _global_step(problem, init, available)
            except InfeasibleBudget:
                seeds.append({"seed": label, "feasible": False})
                continue
        assign, ranks, level, trace, iters, converged = _run_seed(
            problem, init, available, config.max_em_iters
        )
        cost = trace[-1][1]
        seeds.append({
            "seed": label,
            "feasible": True,
            "cost": cost,
            "iterations": iters,
            "converged": converged,
            "trace": [[step, c] for step, c in trace],
        })
        if best is None or cost < best[0]:
            best = (cost, assign, ranks, level)
    if best is None:
        raise InfeasibleBudget(
            f"compression ratio {cr} is infeasible: even rank-1 decompositions exceed the budget"
        )
    _, assign, ranks, level = best
    return _build_plan("alds", problem, assign, ranks, cr, budget, level, seeds)


def run_alds_error(model, cr: float, fixed_k: int, cache: SpectrumCache | None = None,
                   scheme: int = 0):
    """Global step only, with every layer's subspace count fixed (clamped to feasibility)."""
    cache = _resolve_cache(model, cache, sorted(set(range(1, fixed_k + 1))), (scheme,))
    problem = _Problem(cache, None, (scheme,))
    total = _total_params(problem)
    budget = param_budget(cr, total)
    assign = {n: problem.clamp(n, fixed_k, scheme) for n in problem.free}
    ranks, level = _global_step(problem, assign, budget - problem.dense_params)
    return _build_plan(f"alds-error-k{fixed_k}", problem, assign, ranks, cr, budget, level)


__all__ = [
    "AldsConfig",
    "CompressionPlan",
    "InfeasibleBudget",
    "LayerAssignment",
    "optimal_ranks",
    "optimal_subspaces",
    "param_budget",
    "run_alds",
    "run_alds_error",
]
