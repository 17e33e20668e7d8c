"""Command line interface: ``alds analyze|compress|verify|report``.

Exit codes: 0 success, 2 infeasible compression ratio, 3 I/O or format
error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from alds.allocator import AldsConfig, InfeasibleBudget, run_alds, run_alds_error
from alds.baselines import alds_simple, svd_constant, svd_energy
from alds.decompose import max_rank
from alds.error_model import build_spectrum_cache
from alds.model_io import (
    FormatError,
    decompose_by_plan,
    dumps,
    load_compressed,
    load_model,
    save_compressed,
)
from alds.report import build_report, render_csv, render_table
from alds.tensor import folded_shape
from alds.verify import verify

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_IO = 3
EXIT_VERIFY = 4

METHODS = ("alds", "alds-simple", "alds-error", "svd", "svd-energy")


def _schemes(text: str) -> tuple[int, ...]:
    try:
        values = tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scheme list {text!r}") from None
    if not values or any(v not in (0, 1, 2, 3) for v in values):
        raise argparse.ArgumentTypeError("schemes must be drawn from 0,1,2,3")
    return values


def _cr(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid compression ratio {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("--cr must lie strictly between 0 and 1")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    grid = range(1, args.k_max + 1)
    cache = build_spectrum_cache(model, grid, args.schemes)
    print(f"{len(model)} layers, {model.total_params} parameters")
    for layer in model.layers:
        shape = layer.meta.shape
        print(f"\n{layer.name} [{layer.meta.kind}] shape={shape} "
              f"output_pixels={layer.meta.output_pixels}")
        if layer.name in cache.zero_layers:
            print("  all-zero weights: incompressible")
            continue
        ks = [k for k in grid if k <= shape[1]]
        print(f"  feasible k: {ks[0]}..{ks[-1]}")
        for s in args.schemes:
            spec = cache.spectrum(layer.name, 1, s) if 1 in ks else None
            rows, cols = folded_shape(shape, s)
            line = f"  scheme {s}: folded {rows}x{cols}"
            if spec is not None:
                sv = spec.values[0]
                energy = np.cumsum(sv ** 2) / np.sum(sv ** 2)
                j90 = int(np.searchsorted(energy, 0.9)) + 1
                line += (f", sigma_1={spec.alpha1:.4g}, rank={int(np.count_nonzero(sv))}"
                         f", rank@90% energy={j90}")
            print(line)
            for k in ks:
                jmax = max_rank(shape, k, s)
                table = cache.bound_table(layer.name, k, s)
                print(f"    k={k}: j<= {jmax}, bound(j=1)={table[0]:.4f}, "
                      f"bound(j={jmax})={table[-1]:.4f}")
    return EXIT_OK


def make_plan(model, method, cr, k_max=5, seeds=15, schemes=(0,), rng_seed=0, fixed_k=3):
    if method == "alds":
        config = AldsConfig(n_seed=seeds, k_max=k_max, schemes=schemes, rng_seed=rng_seed)
        return run_alds(model, cr, config)
    if method == "alds-error":
        return run_alds_error(model, cr, fixed_k)
    if method == "alds-simple":
        return alds_simple(model, cr, fixed_k)
    if method == "svd":
        return svd_constant(model, cr)
    if method == "svd-energy":
        return svd_energy(model, cr)
    raise ValueError(f"unknown method {method!r}")


def cmd_compress(args) -> int:
    model = load_model(args.model)
    try:
        plan = make_plan(model, args.method, args.cr, args.k_max, args.seeds,
                         args.schemes, args.rng_seed, args.fixed_k)
    except InfeasibleBudget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    decomps = decompose_by_plan(model, plan)
    report = build_report(model, plan, decomps)
    path = save_compressed(model, plan, decomps, args.output, report)
    sys.stdout.write(render_table(report))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = load_model(args.model)
    compressed = load_compressed(args.compressed)
    result = verify(model, compressed, seed=args.seed)
    for name, err in result.errors.items():
        fwd = result.forward.get(name)
        extra = f", forward rel. deviation {fwd:.2e}" if fwd is not None else ""
        print(f"{name}: exact relative error {err:.6g}{extra}")
    for failure in result.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    if not result.ok:
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_report(args) -> int:
    compressed = load_compressed(args.compressed)
    report = compressed.report
    if report is None:
        print("error: file carries no report", file=sys.stderr)
        return EXIT_IO
    if args.format == "json":
        sys.stdout.write(dumps(report))
    elif args.format == "csv":
        sys.stdout.write(render_csv(report))
    else:
        sys.stdout.write(render_table(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alds", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="per-layer shapes, spectra and feasible k")
    p.add_argument("model")
    p.add_argument("--k-max", type=_positive, default=5)
    p.add_argument("--schemes", type=_schemes, default=(0,))
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compress", help="allocate ranks and write a compressed network")
    p.add_argument("model")
    p.add_argument("--cr", type=_cr, required=True, help="target compression ratio in (0, 1)")
    p.add_argument("--method", choices=METHODS, default="alds")
    p.add_argument("--k-max", type=_positive, default=5)
    p.add_argument("--seeds", type=_positive, default=15)
    p.add_argument("--schemes", type=_schemes, default=(0,))
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--fixed-k", type=_positive, default=3,
                   help="subspace count for alds-simple and alds-error")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="recheck errors, forward passes and sizes")
    p.add_argument("model")
    p.add_argument("compressed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="render the stored compression report")
    p.add_argument("compressed")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
