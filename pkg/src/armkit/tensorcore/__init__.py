"""Minimal dense-tensor compute kernel with reverse-mode autodiff."""

from .tensor import (Tensor, no_grad, add, sub, mul, neg, scale, matmul,
                     relu, gelu, sigmoid, log, clamp, reshape, transpose,
                     concat, embedding, layer_norm, softmax, mean, tensor_sum,
                     cross_entropy, focal_loss)
from .layers import (Module, Linear, MLP, LayerNorm, Embedding,
                     CausalSelfAttention, EncoderBlock, init_uniform)
from .optim import AdamW, cosine_schedule, clip_grad_norm
from .gradcheck import grad_check
from .checkpoint import save_checkpoint, load_checkpoint_file

__all__ = [
    "Tensor", "no_grad", "add", "sub", "mul", "neg", "scale", "matmul",
    "relu", "gelu", "sigmoid", "log", "clamp", "reshape", "transpose",
    "concat", "embedding", "layer_norm", "softmax", "mean", "tensor_sum",
    "cross_entropy", "focal_loss",
    "Module", "Linear", "MLP", "LayerNorm", "Embedding",
    "CausalSelfAttention", "EncoderBlock", "init_uniform",
    "AdamW", "cosine_schedule", "clip_grad_norm",
    "grad_check", "save_checkpoint", "load_checkpoint_file",
]
