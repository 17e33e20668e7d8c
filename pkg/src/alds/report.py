"""Compression reports: per-layer accounting plus network-level CR-P / CR-F."""

from __future__ import annotations

import csv
import io

from alds.allocator import CompressionPlan
from alds.decompose import SubspaceDecomposition, reconstruct_folded
from alds.error_model import relative_error_exact
from alds.tensor import fold

LAYER_FIELDS = (
    "name", "k", "j", "scheme", "bound", "bound_sumsq", "exact_error",
    "params_before", "params_after", "macs_before", "macs_after",
)


def exact_errors(model, decompositions) -> dict:
    """Exact relative spectral error of every decomposed layer, on its own folding."""
    out = {}
    for layer in model.layers:
        d = decompositions.get(layer.name)
        if isinstance(d, SubspaceDecomposition):
            out[layer.name] = relative_error_exact(
                fold(layer.weights, d.scheme), reconstruct_folded(d)
            )
    return out


def build_report(model, plan: CompressionPlan, decompositions=None) -> dict:
    errors = exact_errors(model, decompositions) if decompositions else {}
    rows = []
    macs_before = macs_after = 0
    flops_ok = True
    for layer in model.layers:
        a = plan.layer(layer.name)
        pixels = layer.meta.output_pixels
        if pixels is None:
            flops_ok = False
            mb = ma = None
        else:
            mb = a.original_params * pixels
            ma = a.params * pixels
            macs_before += mb
            macs_after += ma
        rows.append({
            "name": a.name,
            "k": a.k,
            "j": a.j,
            "scheme": a.scheme,
            "bound": a.bound,
            "bound_sumsq": a.bound_sumsq,
            "exact_error": errors.get(a.name),
            "params_before": a.original_params,
            "params_after": a.params,
            "macs_before": mb,
            "macs_after": ma,
        })
    feasible_seeds = [s for s in plan.seeds if s.get("feasible")]
    return {
        "method": plan.method,
        "target_cr": plan.target_cr,
        "params_before": plan.total_params,
        "params_after": plan.achieved_params,
        "cr_p": 1.0 - plan.achieved_params / plan.total_params,
        "macs_before": macs_before if flops_ok else None,
        "macs_after": macs_after if flops_ok else None,
        "cr_f": (1.0 - macs_after / macs_before) if flops_ok and macs_before else None,
        "cost": plan.cost,
        "seeds_tried": len(plan.seeds),
        "iterations_per_seed": [s["iterations"] for s in feasible_seeds],
        "flags": list(plan.flags),
        "layers": rows,
    }


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LAYER_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in report["layers"]:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in LAYER_FIELDS})
    return buf.getvalue()


def render_table(report: dict) -> str:
    header = list(LAYER_FIELDS)
    body = [[_fmt(row[k]) for k in header] for row in report["layers"]]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in body]
    lines.append("")
    lines.append(f"method      {report['method']}")
    lines.append(f"target CR   {_fmt(report['target_cr'])}")
    lines.append(f"params      {report['params_before']} -> {report['params_after']}")
    lines.append(f"CR-P        {_fmt(report['cr_p'])}")
    lines.append(f"CR-F        {_fmt(report['cr_f'])}")
    lines.append(f"cost        {_fmt(report['cost'])}")
    lines.append(f"seeds       {report['seeds_tried']}")
    return "\n".join(lines) + "\n"
