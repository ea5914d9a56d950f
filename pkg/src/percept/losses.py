"""Training objectives.

Three scalar losses over a (reference, estimate) signal pair:

* snr_loss      -- negative soft-thresholded SNR in dB.  The threshold tau
                   caps how far the loss can fall for a near-perfect
                   estimate, so easy examples stop dominating a batch.
* feature_loss  -- mean squared distance between frozen-encoder feature
                   maps of the two signals.  Gradient flows through the
                   estimate branch only; the reference map is a constant.
* joint_loss    -- weighted sum of the two (default weights 1, 1).

All three return a LossResult carrying the scalar and, on request, the
gradient with respect to the estimate at its original sample rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from percept.audio import AudioBuffer, resample, resample_adjoint


class LossError(Exception):
    pass


@dataclass(frozen=True)
class SnrLossParams:
    snr_max_db: float = 30.0

    def __post_init__(self):
        if not np.isfinite(self.snr_max_db):
            raise LossError("snr_max_db must be finite")

    @property
    def tau(self) -> float:
        # 30 dB cap -> 1e-3
        return 10.0 ** (-self.snr_max_db / 10.0)


@dataclass
class LossResult:
    value: float
    grad_shat: Optional[np.ndarray] = None
    components: dict = field(default_factory=dict)


def _mono(x, name) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        if x.n_channels != 1:
            raise LossError(f"{name} must be mono, got {x.n_channels} channels")
        return x.samples[0]
    arr = np.asarray(x)
    if arr.ndim == 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 1:
        raise LossError(f"{name} must be a 1-D signal, got shape {arr.shape}")
    return arr


def _rate_of(x, fallback, name):
    if isinstance(x, AudioBuffer):
        return x.sample_rate_hz
    if fallback is None:
        raise LossError(f"{name} is a bare array; pass sample_rate_hz")
    return int(fallback)


def snr_loss(s, s_hat, params: SnrLossParams = SnrLossParams(),
             want_grad: bool = True) -> LossResult:
    """-10*log10(|s|^2 / (|s - s_hat|^2 + tau*|s|^2)).

    Equals -snr_max_db exactly when s_hat == s; invariant to scaling both
    signals by the same nonzero factor.
    """
    sv = _mono(s, "reference")
    ev = _mono(s_hat, "estimate")
    if sv.shape != ev.shape:
        raise LossError(f"length mismatch: reference {sv.shape[0]}, estimate {ev.shape[0]}")
    if sv.size == 0:
        raise LossError("empty signals")
    energy = float(np.dot(sv, sv))
    if energy == 0.0:
        raise LossError("reference signal has zero energy")
    diff = ev - sv
    denom = float(np.dot(diff, diff)) + params.tau * energy
    value = -10.0 * math.log10(energy / denom)
    grad = None
    if want_grad:
        grad = (20.0 / math.log(10.0) / denom) * diff
    return LossResult(value=value, grad_shat=grad, components={"snr": value})


def feature_loss(s, s_hat, encoder, sample_rate_hz=None,
                 want_grad: bool = True) -> LossResult:
    """Mean squared feature-map distance (1/(T*F)) * sum (S - S_hat)^2.

    Signals at a rate other than the encoder's are resampled first; the
    gradient is pulled back through the resampler's adjoint so it lands at
    the estimate's original rate.
    """
    sv = _mono(s, "reference")
    ev = _mono(s_hat, "estimate")
    if sv.shape != ev.shape:
        raise LossError(f"length mismatch: reference {sv.shape[0]}, estimate {ev.shape[0]}")
    rate = _rate_of(s_hat, sample_rate_hz, "estimate")
    enc_rate = encoder.config.input_rate_hz
    n_native = ev.shape[0]
    if rate != enc_rate:
        sv = resample(AudioBuffer(sv[None], rate), enc_rate).samples[0]
        ev = resample(AudioBuffer(ev[None], rate), enc_rate).samples[0]
    ref = encoder.encode(AudioBuffer(sv[None], enc_rate)).values
    if want_grad:
        est_map, cache = encoder.encode_with_cache(AudioBuffer(ev[None], enc_rate))
    else:
        est_map = encoder.encode(AudioBuffer(ev[None], enc_rate))
    est = est_map.values
    d = est - ref
    tf = d.size
    value = float(np.sum(d.astype(np.float64) ** 2)) / tf
    grad = None
    if want_grad:
        grad = encoder.backprop(cache, (2.0 / tf) * d)
        if rate != enc_rate:
            grad = resample_adjoint(grad, rate, enc_rate, n_native)
    return LossResult(value=value, grad_shat=grad, components={"wlm": value})


def joint_loss(s, s_hat, encoder, params: SnrLossParams = SnrLossParams(),
               weights=(1.0, 1.0), sample_rate_hz=None,
               want_grad: bool = True) -> LossResult:
    """weights[0]*snr_loss + weights[1]*feature_loss (defaults give the
    plain unweighted sum)."""
    w_snr, w_fe = float(weights[0]), float(weights[1])
    a = snr_loss(s, s_hat, params, want_grad=want_grad)
    b = feature_loss(s, s_hat, encoder, sample_rate_hz, want_grad=want_grad)
    value = w_snr * a.value + w_fe * b.value
    grad = None
    if want_grad:
        grad = w_snr * a.grad_shat + w_fe * b.grad_shat
    return LossResult(value=value, grad_shat=grad,
                      components={"snr": a.value, "wlm": b.value})
