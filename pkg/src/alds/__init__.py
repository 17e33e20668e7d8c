"""Global low-rank compression of convolutional networks.

Each layer is split into channel groups, every group is folded into a matrix
and truncated with SVD, and the per-layer ranks and group counts are chosen
jointly so the network hits a target compression ratio while the largest
per-layer relative error bound is minimised.
"""

from alds.tensor import FoldedMatrix, conv2d_reference, fold, im2col, unfold
from alds.decompose import (
    ChannelPartition,
    FactorPair,
    SubspaceDecomposition,
    count_flops,
    count_params,
    decompose_layer,
    decomposed_forward,
    partition_channels,
    reconstruct,
    truncated_svd,
)
from alds.error_model import (
    LayerSpectrum,
    SpectrumCache,
    build_spectrum_cache,
    error_bound,
    relative_error_exact,
)
from alds.allocator import (
    AldsConfig,
    CompressionPlan,
    InfeasibleBudget,
    LayerAssignment,
    optimal_ranks,
    optimal_subspaces,
    run_alds,
    run_alds_error,
)
from alds.baselines import alds_simple, svd_constant, svd_energy
from alds.model import LayerMeta, NetworkModel
from alds.model_io import (
    ChecksumError,
    CompressedModel,
    FormatError,
    decompose_by_plan,
    load_compressed,
    load_model,
    save_compressed,
    save_model,
)

__all__ = [
    "AldsConfig",
    "ChannelPartition",
    "ChecksumError",
    "CompressedModel",
    "CompressionPlan",
    "FactorPair",
    "FoldedMatrix",
    "FormatError",
    "InfeasibleBudget",
    "LayerAssignment",
    "LayerMeta",
    "LayerSpectrum",
    "NetworkModel",
    "SpectrumCache",
    "SubspaceDecomposition",
    "alds_simple",
    "build_spectrum_cache",
    "conv2d_reference",
    "count_flops",
    "count_params",
    "decompose_by_plan",
    "decompose_layer",
    "decomposed_forward",
    "error_bound",
    "fold",
    "im2col",
    "load_compressed",
    "load_model",
    "optimal_ranks",
    "optimal_subspaces",
    "partition_channels",
    "reconstruct",
    "relative_error_exact",
    "run_alds",
    "run_alds_error",
    "save_compressed",
    "save_model",
    "svd_constant",
    "svd_energy",
    "truncated_svd",
    "unfold",
]
