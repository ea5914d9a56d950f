"""Differentiable layer primitives: convolutions, pointwise ops, norms.

Everything here works on plain numpy arrays.  Convolutions are "valid"
(no implicit padding); an explicit symmetric zero-pad amount can be given.
Backward passes are hand-derived adjoints and are checked against central
finite differences in the test suite and the gradcheck command.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from percept.nn.core import Layer, Parameter, bias_uniform, check_finite, kaiming_uniform

LN_EPS = 1e-8


def conv1d_output_length(n: int, kernel: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> int:
    span = (kernel - 1) * dilation + 1
    if n + 2 * pad < span:
        raise ValueError(f"input length {n} (pad {pad}) shorter than kernel span {span}")
    return (n + 2 * pad - span) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, dilation: int, t: int) -> np.ndarray:
    # View of shape [C, kernel, t] with w[c, j, i] = x[c, i*stride + j*dilation].
    sc, sn = x.strides
    return as_strided(x, shape=(x.shape[0], kernel, t), strides=(sc, dilation * sn, stride * sn))


def _conv1d_core(xp, weight, stride, dilation, t):
    cout, cin_g, k = weight.shape
    cin = xp.shape[0]
    groups = cin // cin_g
    if groups == 1:
        xcol = _windows(xp, k, stride, dilation, t).reshape(cin * k, t)
        return weight.reshape(cout, cin * k) @ xcol
    if groups == cin and cout == cin:  # depthwise
        win = _windows(xp, k, stride, dilation, t)
        return np.einsum("cj,cjt->ct", weight[:, 0, :], win)
    out = np.empty((cout, t), dtype=np.result_type(xp, weight))
    co_g = cout // groups
    for g in range(groups):
        xs = xp[g * cin_g : (g + 1) * cin_g]
        ws = weight[g * co_g : (g + 1) * co_g]
        xcol = _windows(xs, k, stride, dilation, t).reshape(cin_g * k, t)
        out[g * co_g : (g + 1) * co_g] = ws.reshape(co_g, cin_g * k) @ xcol
    return out


def conv1d_forward(x, weight, bias=None, stride=1, dilation=1, groups=1, pad=0):
    """Valid 1-D convolution of ``x [Cin, N]`` with ``weight [Cout, Cin/groups, k]``."""
    cin, n = x.shape
    cout, cin_g, k = weight.shape
    if cin % groups or cout % groups:
        raise ValueError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g} input channels per group, input has {cin // groups}")
    t = conv1d_output_length(n, k, stride, dilation, pad)
    xp = np.pad(x, ((0, 0), (pad, pad))) if pad else x
    out = _conv1d_core(xp, weight, stride, dilation, t)
    if bias is not None:
        out = out + bias[:, None]
    return check_finite(out, "conv1d output")


def conv1d_backward(grad_out, x, weight, stride=1, dilation=1, groups=1, pad=0, bias=True,
                    need_weight=True):
    """Gradients of :func:`conv1d_forward` w.r.t. input, weight and bias.

    ``need_weight=False`` skips the weight/bias gradients (frozen-weight
    backprop through the feature encoder only needs the input gradient).
    """
    cin, n = x.shape
    cout, cin_g, k = weight.shape
    t = grad_out.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gw = np.empty_like(weight) if need_weight else None
    co_g = cout // groups
    for g in range(groups):
        xs = xp[g * cin_g : (g + 1) * cin_g]
        ws = weight[g * co_g : (g + 1) * co_g]
        go = grad_out[g * co_g : (g + 1) * co_g]
        if need_weight:
            win = _windows(xs, k, stride, dilation, t)
            gw[g * co_g : (g + 1) * co_g] = np.einsum("ot,cjt->ocj", go, win)
        gxs = gxp[g * cin_g : (g + 1) * cin_g]
        for j in range(k):
            sl = slice(j * dilation, j * dilation + t * stride, stride)
            gxs[:, sl] += ws[:, :, j].T @ go
    gx = gxp[:, pad : pad + n] if pad else gxp
    gb = grad_out.sum(axis=1) if (bias and need_weight) else None
    return gx, gw, gb


def conv_transpose1d_forward(x, weight, bias=None, stride=1):
    """Transposed 1-D convolution: ``x [Cin, T]``, ``weight [Cin, Cout, k]`` -> ``[Cout, (T-1)*stride + k]``.

    Adjoint of :func:`conv1d_forward` with the same weight (axes swapped).
    """
    cin, t = x.shape
    cin_w, cout, k = weight.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, weight expects {cin_w}")
    n_out = (t - 1) * stride + k
    out = np.zeros((cout, n_out), dtype=np.result_type(x, weight))
    for j in range(k):
        out[:, j : j + t * stride : stride] += weight[:, :, j].T @ x
    if bias is not None:
        out += bias[:, None]
    return check_finite(out, "conv_transpose1d output")


def conv_transpose1d_backward(grad_out, x, weight, stride=1, bias=True):
    cin, t = x.shape
    _, cout, k = weight.shape
    win = _windows(grad_out, k, stride, 1, t)  # win[c, j, i] = grad_out[c, i*stride + j]
    gx = np.einsum("icj,cjt->it", weight, win)
    gw = np.einsum("it,cjt->icj", x, win)
    gb = grad_out.sum(axis=1) if bias else None
    return gx, gw, gb


class Conv1d(Layer):
    """1-D convolution layer over ``[Cin, N]`` inputs."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, dilation=1, groups=1,
                 pad=0, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation, self.groups, self.pad = stride, dilation, groups, pad
        fan_in = (in_channels // groups) * kernel
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (out_channels, in_channels // groups, kernel), fan_in, dtype))
        self.has_bias = bias
        if bias:
            self.params["bias"] = Parameter(bias_uniform(rng, (out_channels,), fan_in, dtype))

    def forward(self, x):
        self._cache = x
        b = self.params["bias"].value if self.has_bias else None
        return conv1d_forward(x, self.params["weight"].value, b,
                              self.stride, self.dilation, self.groups, self.pad)

    def backward(self, grad_out):
        x = self._take_cache()
        gx, gw, gb = conv1d_backward(grad_out, x, self.params["weight"].value,
                                     self.stride, self.dilation, self.groups, self.pad,
                                     bias=self.has_bias)
        self.params["weight"].accumulate(gw)
        if self.has_bias:
            self.params["bias"].accumulate(gb)
        return gx


class SpatialConv2d(Layer):
    """2-D convolution whose kernel height spans the whole channel axis.

    Input ``[1, C, N]``, weight ``[Cout, 1, C, k]``, stride ``(1, s)``; the
    output ``[Cout, 1, T]`` has the same frame count as a 1-D convolution
    with the same kernel width and stride, so the two encoder outputs stay
    frame-aligned.
    """

    def __init__(self, height, out_channels, kernel, stride=1, pad=0, bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.height, self.stride, self.pad = height, stride, pad
        fan_in = height * kernel
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (out_channels, 1, height, kernel), fan_in, dtype))
        self.has_bias = bias
        if bias:
            self.params["bias"] = Parameter(bias_uniform(rng, (out_channels,), fan_in, dtype))

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != 1 or x.shape[1] != self.height:
            raise ValueError(f"expected input [1, {self.height}, N], got {x.shape}")
        self._cache = x
        w = self.params["weight"].value
        b = self.params["bias"].value if self.has_bias else None
        # Height == C collapses the 2-D conv to a 1-D conv over all channels.
        out = conv1d_forward(x[0], w[:, 0], b, self.stride, 1, 1, self.pad)
        return out[:, None, :]

    def backward(self, grad_out):
        x = self._take_cache()
        w = self.params["weight"].value
        gx, gw, gb = conv1d_backward(grad_out[:, 0, :], x[0], w[:, 0],
                                     self.stride, 1, 1, self.pad, bias=self.has_bias)
        self.params["weight"].accumulate(gw[:, None])
        if self.has_bias:
            self.params["bias"].accumulate(gb)
        return gx[None]


class ConvTranspose1d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        fan_in = in_channels * kernel
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (in_channels, out_channels, kernel), fan_in, dtype))
        self.has_bias = bias
        if bias:
            self.params["bias"] = Parameter(bias_uniform(rng, (out_channels,), fan_in, dtype))

    def forward(self, x):
        self._cache = x
        b = self.params["bias"].value if self.has_bias else None
        return conv_transpose1d_forward(x, self.params["weight"].value, b, self.stride)

    def backward(self, grad_out):
        x = self._take_cache()
        gx, gw, gb = conv_transpose1d_backward(grad_out, x, self.params["weight"].value,
                                               self.stride, bias=self.has_bias)
        self.params["weight"].accumulate(gw)
        if self.has_bias:
            self.params["bias"].accumulate(gb)
        return gx


# --- pointwise ops ---------------------------------------------------------


def sigmoid(x):
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


GELU_C0 = math.sqrt(2.0 / math.pi)
GELU_C1 = 0.044715  # tanh-approximation cubic coefficient


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C0 * (x + GELU_C1 * x**3)))


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._take_cache()
        return grad_out * y * (1.0 - y)


class ReLU(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._take_cache()


class GELU(Layer):
    def forward(self, x):
        self._cache = x
        return gelu(x)

    def backward(self, grad_out):
        x = self._take_cache()
        t = np.tanh(GELU_C0 * (x + GELU_C1 * x**3))
        du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x**2)
        return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


class PReLU(Layer):
    """Parametric ReLU with a single shared slope."""

    def __init__(self, alpha=0.25, dtype=np.float32):
        super().__init__()
        self.params["alpha"] = Parameter(np.array(alpha, dtype=dtype))

    def forward(self, x):
        self._cache = x
        a = self.params["alpha"].value
        return np.where(x > 0, x, a * x)

    def backward(self, grad_out):
        x = self._take_cache()
        a = self.params["alpha"].value
        neg = x <= 0
        self.params["alpha"].accumulate(
            np.asarray(np.sum(grad_out * x * neg), dtype=a.dtype).reshape(a.shape))
        return grad_out * np.where(neg, a, np.ones((), dtype=a.dtype))


def prelu(x, alpha):
    return np.where(x > 0, x, alpha * x)


class ElementwiseMul(Layer):
    """Hadamard product of two same-shape arrays."""

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        self._cache = (a, b)
        return a * b

    def __call__(self, a, b):
        return self.forward(a, b)

    def backward(self, grad_out):
        a, b = self._take_cache()
        return grad_out * b, grad_out * a


class Add(Layer):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def __call__(self, a, b):
        return self.forward(a, b)

    def backward(self, grad_out):
        return grad_out, grad_out


# --- normalization ---------------------------------------------------------


class GlobalLayerNorm(Layer):
    """Normalize a ``[F, T]`` map by the mean/variance of all F*T entries,
    then apply a per-channel affine transform."""

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        mu = x.mean()
        sig = np.sqrt(x.var() + LN_EPS)
        xhat = (x - mu) / sig
        self._cache = (xhat, sig)
        return self.params["gamma"].value[:, None] * xhat + self.params["beta"].value[:, None]

    def backward(self, grad_out):
        xhat, sig = self._take_cache()
        gh = grad_out * self.params["gamma"].value[:, None]
        self.params["gamma"].accumulate((grad_out * xhat).sum(axis=1))
        self.params["beta"].accumulate(grad_out.sum(axis=1))
        return (gh - gh.mean() - xhat * (gh * xhat).mean()) / sig


class ChannelNorm(Layer):
    """Per-channel normalization over time (group norm with one channel per
    group), with per-channel affine parameters."""

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["beta"] = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        mu = x.mean(axis=1, keepdims=True)
        sig = np.sqrt(x.var(axis=1, keepdims=True) + LN_EPS)
        xhat = (x - mu) / sig
        self._cache = (xhat, sig)
        return self.params["gamma"].value[:, None] * xhat + self.params["beta"].value[:, None]

    def backward(self, grad_out):
        xhat, sig = self._take_cache()
        gh = grad_out * self.params["gamma"].value[:, None]
        self.params["gamma"].accumulate((grad_out * xhat).sum(axis=1))
        self.params["beta"].accumulate(grad_out.sum(axis=1))
        return (gh - gh.mean(axis=1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)) / sig
