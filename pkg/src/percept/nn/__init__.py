"""From-scratch differentiable layers on numpy arrays."""

from percept.nn.core import Layer, Parameter, bias_uniform, check_finite, kaiming_uniform
from percept.nn.layers import (
    GELU_C0,
    GELU_C1,
    LN_EPS,
    Add,
    ChannelNorm,
    Conv1d,
    ConvTranspose1d,
    ElementwiseMul,
    GELU,
    GlobalLayerNorm,
    PReLU,
    ReLU,
    Sigmoid,
    SpatialConv2d,
    conv1d_backward,
    conv1d_forward,
    conv1d_output_length,
    conv_transpose1d_backward,
    conv_transpose1d_forward,
    gelu,
    prelu,
    sigmoid,
)

__all__ = [
    "GELU_C0",
    "GELU_C1",
    "LN_EPS",
    "Add",
    "ChannelNorm",
    "Conv1d",
    "ConvTranspose1d",
    "ElementwiseMul",
    "GELU",
    "GlobalLayerNorm",
    "Layer",
    "PReLU",
    "Parameter",
    "ReLU",
    "Sigmoid",
    "SpatialConv2d",
    "bias_uniform",
    "check_finite",
    "conv1d_backward",
    "conv1d_forward",
    "conv1d_output_length",
    "conv_transpose1d_backward",
    "conv_transpose1d_forward",
    "gelu",
    "kaiming_uniform",
    "prelu",
    "sigmoid",
]
