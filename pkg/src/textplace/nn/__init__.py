"""Minimal float64 autodiff, layers and optimizer used by the placement model."""

from .autograd import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    no_grad,
    parameter,
    sigmoid,
    softmax,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    Conv2d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    TransformerBlock,
    multi_head_self_attention,
)
from .optim import AdamW, AdamWState, adamw_step

__all__ = [
    "AdamW", "AdamWState", "Conv2d", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadSelfAttention", "Tensor", "TransformerBlock", "adamw_step", "as_tensor",
    "concat", "conv2d", "gelu", "layer_norm", "linear", "load_checkpoint", "matmul",
    "multi_head_self_attention", "no_grad", "parameter", "save_checkpoint", "sigmoid", "softmax",
]
