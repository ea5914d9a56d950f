"""Central finite-difference verification of every backward pass.

All checks run in float64.  Each named check draws fresh inputs per seed,
computes an analytic gradient through the layer/loss/model backward, and
compares against central differences of a scalar objective.  Relative
error is the infinity norm of the difference over the infinity norm of
the numeric gradient.

Used both by the test suite and the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from percept.audio import AudioBuffer
from percept.denoiser import DenoiserModel, tiny_denoiser_config
from percept.encoder import FeatureEncoder, tiny_config
from percept.losses import SnrLossParams, feature_loss, joint_loss, snr_loss
from percept.nn import (ChannelNorm, Conv1d, ConvTranspose1d, ElementwiseMul, GELU,
                        GlobalLayerNorm, PReLU, Sigmoid, SpatialConv2d)

TOLERANCE = 1e-4
FD_STEP = 1e-6
DEFAULT_SEEDS = tuple(range(20))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_seeds: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / denom


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Full central-difference gradient; mutates x in place while probing."""
    g = np.zeros_like(x, dtype=np.float64)
    xf, gf = x.reshape(-1), g.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f()
        xf[i] = orig - h
        fm = f()
        xf[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_grad_at(f, x: np.ndarray, idx, h: float = FD_STEP) -> np.ndarray:
    """Central differences at the given flat indices only."""
    xf = x.reshape(-1)
    out = np.empty(len(idx), dtype=np.float64)
    for j, i in enumerate(idx):
        orig = xf[i]
        xf[i] = orig + h
        fp = f()
        xf[i] = orig - h
        fm = f()
        xf[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def _layer_err(layer, inputs, seed) -> float:
    """Max rel err over input grads and all parameter grads of one layer.

    The objective is sum(upstream * forward(inputs)), linear in the output
    so its gradient through the layer is exactly the backward pass.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(*inputs)
    u = rng.standard_normal(out.shape)

    def obj():
        return float(np.sum(layer.forward(*inputs) * u))

    layer.forward(*inputs)
    grads_in = layer.backward(u)
    if not isinstance(grads_in, tuple):
        grads_in = (grads_in,)
    errs = [rel_err(g, numeric_grad(obj, x)) for g, x in zip(grads_in, inputs)]
    for p in layer.params.values():
        errs.append(rel_err(p.grad, numeric_grad(obj, p.value)))
    return max(errs)


def _mk(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    layer = Conv1d(3, 4, 3, stride=2, dilation=2, pad=2, rng=rng, dtype=np.float64)
    return _layer_err(layer, (_mk(seed + 1, 3, 17),), seed)


def check_conv1d_grouped(seed):
    rng = np.random.default_rng(seed)
    layer = Conv1d(4, 6, 3, stride=1, groups=2, pad=1, rng=rng, dtype=np.float64)
    return _layer_err(layer, (_mk(seed + 1, 4, 12),), seed)


def check_conv1d_depthwise(seed):
    rng = np.random.default_rng(seed)
    layer = Conv1d(4, 4, 3, dilation=2, groups=4, pad=2, rng=rng, dtype=np.float64)
    return _layer_err(layer, (_mk(seed + 1, 4, 14),), seed)


def check_conv_transpose1d(seed):
    rng = np.random.default_rng(seed)
    layer = ConvTranspose1d(3, 2, 4, stride=2, rng=rng, dtype=np.float64)
    return _layer_err(layer, (_mk(seed + 1, 3, 9),), seed)


def check_spatial_conv(seed):
    rng = np.random.default_rng(seed)
    layer = SpatialConv2d(3, 4, 5, stride=2, rng=rng, dtype=np.float64)
    return _layer_err(layer, (_mk(seed + 1, 1, 3, 16),), seed)


def check_gelu(seed):
    return _layer_err(GELU(), (_mk(seed + 1, 4, 11),), seed)


def check_sigmoid(seed):
    return _layer_err(Sigmoid(), (_mk(seed + 1, 4, 11),), seed)


def check_prelu(seed):
    return _layer_err(PReLU(alpha=0.2, dtype=np.float64), (_mk(seed + 1, 4, 11),), seed)


def check_global_layer_norm(seed):
    layer = GlobalLayerNorm(5, dtype=np.float64)
    rng = np.random.default_rng(seed + 2)
    layer.params["gamma"].value[:] = rng.uniform(0.5, 1.5, layer.params["gamma"].value.shape)
    layer.params["beta"].value[:] = rng.standard_normal(layer.params["beta"].value.shape)
    return _layer_err(layer, (_mk(seed + 1, 5, 9),), seed)


def check_channel_norm(seed):
    layer = ChannelNorm(5, dtype=np.float64)
    rng = np.random.default_rng(seed + 2)
    layer.params["gamma"].value[:] = rng.uniform(0.5, 1.5, layer.params["gamma"].value.shape)
    layer.params["beta"].value[:] = rng.standard_normal(layer.params["beta"].value.shape)
    return _layer_err(layer, (_mk(seed + 1, 5, 9),), seed)


def check_elementwise_mul(seed):
    return _layer_err(ElementwiseMul(), (_mk(seed + 1, 3, 8), _mk(seed + 2, 3, 8)), seed)


def _tiny_encoder(seed):
    return FeatureEncoder.init_random(tiny_config(4), seed=seed).astype(np.float64)


def check_snr_grad(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(64)
    s_hat = s + 0.3 * rng.standard_normal(64)
    params = SnrLossParams()
    res = snr_loss(s, s_hat, params)

    def obj():
        return snr_loss(s, s_hat, params, want_grad=False).value

    return rel_err(res.grad_shat, numeric_grad(obj, s_hat))


def check_feature_grad(seed):
    enc = _tiny_encoder(seed)
    rng = np.random.default_rng(seed + 1)
    n = enc.config.receptive_field + 4 * enc.config.hop
    s = rng.standard_normal(n)
    s_hat = s + 0.3 * rng.standard_normal(n)
    res = feature_loss(s, s_hat, enc, sample_rate_hz=enc.config.input_rate_hz)

    def obj():
        return feature_loss(s, s_hat, enc, sample_rate_hz=enc.config.input_rate_hz,
                            want_grad=False).value

    idx = rng.choice(n, size=12, replace=False)
    return rel_err(res.grad_shat.reshape(-1)[idx], numeric_grad_at(obj, s_hat, idx))


def check_feature_grad_resampled(seed):
    # gradient must flow back through the rate converter to the native rate
    enc = _tiny_encoder(seed)
    rng = np.random.default_rng(seed + 1)
    n = 160
    s = rng.standard_normal(n)
    s_hat = s + 0.3 * rng.standard_normal(n)
    res = feature_loss(s, s_hat, enc, sample_rate_hz=22050)

    def obj():
        return feature_loss(s, s_hat, enc, sample_rate_hz=22050, want_grad=False).value

    idx = rng.choice(n, size=8, replace=False)
    return rel_err(res.grad_shat.reshape(-1)[idx], numeric_grad_at(obj, s_hat, idx))


def check_joint_grad(seed):
    enc = _tiny_encoder(seed)
    rng = np.random.default_rng(seed + 1)
    n = enc.config.receptive_field + 4 * enc.config.hop
    s = rng.standard_normal(n)
    s_hat = s + 0.3 * rng.standard_normal(n)
    params = SnrLossParams()
    rate = enc.config.input_rate_hz
    res = joint_loss(s, s_hat, enc, params, sample_rate_hz=rate)

    def obj():
        return joint_loss(s, s_hat, enc, params, sample_rate_hz=rate,
                          want_grad=False).value

    idx = rng.choice(n, size=12, replace=False)
    return rel_err(res.grad_shat.reshape(-1)[idx], numeric_grad_at(obj, s_hat, idx))


def check_encoder_input_grad(seed):
    enc = _tiny_encoder(seed)
    rng = np.random.default_rng(seed + 1)
    n = enc.config.receptive_field + 4 * enc.config.hop
    x = rng.standard_normal(n)
    fm = enc.encode(AudioBuffer(x[None], enc.config.input_rate_hz))
    u = rng.standard_normal(fm.values.shape)
    _, g = enc.encode_grad(AudioBuffer(x[None], enc.config.input_rate_hz), u)

    def obj():
        f = enc.encode(AudioBuffer(x[None], enc.config.input_rate_hz)).values
        return float(np.sum(f * u))

    return rel_err(g, numeric_grad(obj, x))


def check_denoiser_grads(seed):
    """Input grad plus a random subsample of every parameter tensor of the
    tiny model, against FD of a linear objective on the output."""
    cfg = tiny_denoiser_config(n_mics=2, sample_rate_hz=16000)
    model = DenoiserModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 64))
    out = model.forward(x)
    u = rng.standard_normal(out.shape)

    def obj():
        return float(np.sum(model.forward(x) * u))

    model.forward(x)
    gx = model.backward(u)
    params = model.parameters()

    errs = []
    idx = rng.choice(x.size, size=8, replace=False)
    errs.append(rel_err(gx.reshape(-1)[idx], numeric_grad_at(obj, x, idx)))
    for name, p in params.items():
        k = min(4, p.value.size)
        pick = rng.choice(p.value.size, size=k, replace=False)
        errs.append(rel_err(p.grad.reshape(-1)[pick],
                            numeric_grad_at(obj, p.value, pick)))
    return max(errs)


SUITES = {
    "layers": (
        ("conv1d", check_conv1d),
        ("conv1d_grouped", check_conv1d_grouped),
        ("conv1d_depthwise", check_conv1d_depthwise),
        ("conv_transpose1d", check_conv_transpose1d),
        ("spatial_conv", check_spatial_conv),
        ("gelu", check_gelu),
        ("sigmoid", check_sigmoid),
        ("prelu", check_prelu),
        ("global_layer_norm", check_global_layer_norm),
        ("channel_norm", check_channel_norm),
        ("elementwise_mul", check_elementwise_mul),
    ),
    "losses": (
        ("snr_loss", check_snr_grad),
        ("feature_loss", check_feature_grad),
        ("feature_loss_resampled", check_feature_grad_resampled),
        ("joint_loss", check_joint_grad),
    ),
    "encoder": (
        ("encoder_input", check_encoder_input_grad),
    ),
    "denoiser": (
        ("denoiser_full", check_denoiser_grads),
    ),
}


def run_suite(module: str = "all", seeds=None) -> list:
    """Run one suite (or all) over the given seeds; returns CheckResults in
    a stable order."""
    if module == "all":
        names = list(SUITES)
    elif module in SUITES:
        names = [module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; "
                         f"choose from {('all',) + tuple(SUITES)}")
    seeds = tuple(seeds) if seeds is not None else DEFAULT_SEEDS
    results = []
    for suite in names:
        for name, fn in SUITES[suite]:
            worst = max(fn(seed) for seed in seeds)
            results.append(CheckResult(name=name, max_rel_err=worst, n_seeds=len(seeds)))
    return results
