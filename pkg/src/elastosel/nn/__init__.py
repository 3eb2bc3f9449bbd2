"""Small NumPy neural-network kernel: layers, loss, Adam, serialization."""

from .functional import (
    BatchNormLayer,
    ConvLayer,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool,
    global_avg_pool_backward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
)
from .model import BatchNorm, Conv, Dense, GlobalAvgPool, Model, ReLU, load_model, save_model
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "BatchNorm", "BatchNormLayer", "Conv", "ConvLayer", "Dense",
    "GlobalAvgPool", "Model", "ReLU", "adam_step", "batchnorm_backward",
    "batchnorm_forward", "conv2d_backward", "conv2d_forward", "dense_backward",
    "dense_forward", "global_avg_pool", "global_avg_pool_backward", "load_model",
    "relu_backward", "relu_forward", "save_model", "softmax", "softmax_cross_entropy",
]
