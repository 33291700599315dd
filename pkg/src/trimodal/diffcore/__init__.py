from .autograd import Node, Param, record_kinks
from .gradcheck import GradCheckReport, gradient_check
from .ops import (BatchNormState, add, batchnorm, channel_shuffle, concat, conv1d, conv2d,
                  cross_entropy, dropout, global_avg_pool, linear, matmul, maxpool1d, mean,
                  mul, relu, reshape, scale, sigmoid, softmax, transpose)
from .rng import RngStream, rng

__all__ = [
    "Node", "Param", "record_kinks", "GradCheckReport", "gradient_check", "BatchNormState",
    "add", "batchnorm", "channel_shuffle", "concat", "conv1d", "conv2d", "cross_entropy",
    "dropout", "global_avg_pool", "linear", "matmul", "maxpool1d", "mean", "mul", "relu",
    "reshape", "scale", "sigmoid", "softmax", "transpose", "RngStream", "rng",
]
