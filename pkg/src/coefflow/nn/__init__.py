"""Minimal differentiable-computation kernel."""
from .ops import (  # noqa: F401
    add, clip, concat, dropout, exp, ffn, gaussian_kl, graph_conv, layer_norm, linear, matmul,
    mean, mse_loss, mul, multi_head_attention, neg, relu, reshape, sigmoid, silu, slice_axis,
    softmax, sum, temporal_conv1d, transpose,
)
from .params import (  # noqa: F401
    AdamState, ParamStore, adam_step, add_linear, add_norm, glorot, grad_check, one_cycle_lr,
)
from .tensor import NonFiniteError, Tensor, as_tensor  # noqa: F401
