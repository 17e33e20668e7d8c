"""Independent checks of a compressed file against its source network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from alds.decompose import (
    SubspaceDecomposition,
    decomposed_forward,
    reconstruct,
    reconstruct_folded,
)
from alds.error_model import relative_error_exact
from alds.model import NetworkModel
from alds.model_io import CompressedModel
from alds.tensor import conv2d_reference, fold

# slack on the stored bound for float32 storage of the factors
BOUND_SLACK = 1e-6
FORWARD_RTOL = 1e-8


@dataclass
class VerifyResult:
    errors: dict = field(default_factory=dict)
    forward: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _synthetic_input(meta, rng):
    f, c, k1, k2 = meta.shape
    if meta.input_size is not None:
        m1, m2 = meta.input_size
    else:
        m1, m2 = k1 + 4, k2 + 4
    return rng.standard_normal((c, m1, m2))


def verify(model: NetworkModel, compressed: CompressedModel, seed: int = 0) -> VerifyResult:
    result = VerifyResult()
    rng = np.random.default_rng(seed)
    plan = compressed.plan
    if [m.name for m in compressed.metas] != model.names:
        result.failures.append("layer names differ between model and compressed file")
        return result
    for layer in model.layers:
        name = layer.name
        stored = compressed.layers[name]
        a = plan.layer(name) if plan is not None else None
        if not isinstance(stored, SubspaceDecomposition):
            if stored.shape != layer.weights.shape:
                result.failures.append(f"{name}: dense weights have the wrong shape")
            continue
        if tuple(stored.origin_shape) != tuple(layer.weights.shape):
            result.failures.append(f"{name}: decomposition shape mismatch")
            continue
        err = relative_error_exact(fold(layer.weights, stored.scheme), reconstruct_folded(stored))
        result.errors[name] = err
        if a is not None and err > a.bound + BOUND_SLACK:
            result.failures.append(
                f"{name}: exact error {err:.3e} exceeds stored bound {a.bound:.3e}"
            )
        if stored.scheme == 0:
            x = _synthetic_input(layer.meta, rng)
            y = decomposed_forward(stored, x, layer.meta.stride, layer.meta.padding)
            ref = conv2d_reference(reconstruct(stored), x, layer.meta.stride, layer.meta.padding)
            rel = float(np.linalg.norm(y - ref) / max(np.linalg.norm(ref), 1e-300))
            result.forward[name] = rel
            if rel > FORWARD_RTOL:
                result.failures.append(f"{name}: decomposed forward deviates by {rel:.3e}")
    if plan is not None:
        recount = compressed.num_params
        if recount != plan.achieved_params:
            result.failures.append(
                f"stored tensors hold {recount} parameters, plan says {plan.achieved_params}"
            )
        if plan.total_params != model.total_params:
            result.failures.append("plan total parameters differ from the model")
        report = compressed.report
        if report is not None:
            cr_p = 1.0 - recount / model.total_params
            if report.get("cr_p") != cr_p or report.get("params_after") != recount:
                result.failures.append("reported CR-P does not match the stored tensors")
    return result
