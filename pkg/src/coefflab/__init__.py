"""Coefficient tuning of multi-head attention as a filter-subspace graph convolution."""

from ._kernels import BACKEND
from .attention import (
    AttentionParams,
    FilterSubspace,
    attention_map,
    filter_subspace,
    graph_conv_forward,
    init_attention_params,
    multi_head_concat,
    multi_head_sum,
    single_head_attention,
)
from .coeff import (
    DIRECT_IDENTITY,
    DIRECT_RANDOM,
    RESIDUAL_ZERO,
    SubspaceCoefficient,
    coeff_attention_forward,
    combine_filters,
    count_coeff_params,
    effective_coefficient,
)
from .errors import ArityError, CoeffLabError, DimensionError, NumericError, TrainingError, UsageError
from .params import LayerDims, ratio_vs_attention, ratio_vs_lora, vit_coeff_budget
from .tensor import Matrix, Tape, backward, matmul, mse_loss, softmax_rows

__version__ = "0.1.0"
