from .init import init_weights, xavier_bound
from .ops import (
    BatchNormParams,
    ConvParams,
    batchnorm,
    conv3d_dilated,
    conv_output_size,
    cross_entropy,
    dropout3d,
    logsoftmax,
    relu,
    softmax,
)
from .optim import Adam, AdamState, adam_step
from .tensor import GraphError, Tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormParams",
    "ConvParams",
    "GraphError",
    "Tensor",
    "adam_step",
    "backward",
    "batchnorm",
    "conv3d_dilated",
    "conv_output_size",
    "cross_entropy",
    "dropout3d",
    "init_weights",
    "logsoftmax",
    "relu",
    "softmax",
    "xavier_bound",
]
