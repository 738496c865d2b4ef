from .functional import (
    BatchNormState, ConvSpec, ShapeError, batchnorm_backward, batchnorm_forward,
    conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, linear,
    linear_backward, relu, relu_backward, sigmoid, sigmoid_backward,
)
from .optim import NonFiniteGradientError, OptState, sgd_step
from .rng import make_rng

__all__ = [
    "BatchNormState", "ConvSpec", "ShapeError", "batchnorm_backward", "batchnorm_forward",
    "conv3d_backward", "conv3d_forward", "deconv3d_backward", "deconv3d_forward", "linear",
    "linear_backward", "relu", "relu_backward", "sigmoid", "sigmoid_backward",
    "NonFiniteGradientError", "OptState", "sgd_step", "make_rng",
]
