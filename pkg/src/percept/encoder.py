"""Frozen convolutional feature encoder.

A stack of strided 1-D convolutions (GELU after every layer, a channel
layer-norm after the first) mapping a mono waveform to an [F x T] feature
map.  Weights are always frozen: the only gradient path is with respect to
the input signal, which is what the feature-distance loss needs.

The first-layer norm uses per-frame statistics over the channel axis, so
every output frame is a function of its receptive field alone; shifting
the input by one hop shifts the feature map by exactly one frame.
Utterance-level statistics would break that locality.

The default profile mirrors the conv frontend of a widely used
self-supervised speech model: 7 layers, 512 channels throughout, kernels
(10,3,3,3,3,2,2), strides (5,2,2,2,2,2,2), 16 kHz input.  Receptive field
400 samples, hop 320, so one second of audio gives 49 frames of dimension
512.  Tiny profiles (2 layers, a handful of channels) are first-class for
tests and desk-scale training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from percept import sewf
from percept.audio import AudioBuffer
from percept.nn.layers import LN_EPS, conv1d_backward, conv1d_forward, gelu
from percept.nn.layers import GELU_C0, GELU_C1

NORM_FIRST = "group_norm_first_layer"
NORM_NONE = "none"

DEFAULT_PROFILE = "wavlm-base-fe"
_DEFAULT_LAYERS = ((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
                   (512, 3, 2), (512, 2, 2), (512, 2, 2))


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the conv feature stack.

    layers: sequence of (out_channels, kernel, stride) tuples.
    feature_dim is derived from the last layer when left at 0.
    """

    layers: tuple = _DEFAULT_LAYERS
    activation: str = "gelu"
    norm: str = NORM_FIRST
    input_rate_hz: int = 16000
    feature_dim: int = 0

    def __post_init__(self):
        layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        if not layers:
            raise EncoderError("encoder needs at least one layer")
        for layer in layers:
            if len(layer) != 3 or any(v <= 0 for v in layer):
                raise EncoderError(f"bad layer spec {layer}; want (channels, kernel, stride) > 0")
        object.__setattr__(self, "layers", layers)
        if self.activation != "gelu":
            raise EncoderError(f"unsupported activation {self.activation!r}")
        if self.norm not in (NORM_FIRST, NORM_NONE):
            raise EncoderError(f"unsupported norm {self.norm!r}")
        fd = layers[-1][0]
        if self.feature_dim == 0:
            object.__setattr__(self, "feature_dim", fd)
        elif self.feature_dim != fd:
            raise EncoderError(
                f"feature_dim {self.feature_dim} != last layer channels {fd}")

    @property
    def receptive_field(self) -> int:
        rf, hop = 1, 1
        for _, k, s in self.layers:
            rf += (k - 1) * hop
            hop *= s
        return rf

    @property
    def hop(self) -> int:
        hop = 1
        for _, _, s in self.layers:
            hop *= s
        return hop

    def n_frames(self, n_samples: int) -> int:
        n = n_samples
        for _, k, s in self.layers:
            if n < k:
                raise EncoderError(
                    f"input of {n_samples} samples too short; need >= {self.receptive_field}")
            n = (n - k) // s + 1
        return n

    def to_dict(self) -> dict:
        return {"layers": [list(layer) for layer in self.layers],
                "activation": self.activation, "norm": self.norm,
                "input_rate_hz": self.input_rate_hz, "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {"layers", "activation", "norm", "input_rate_hz", "feature_dim"}
        unknown = set(d) - known
        if unknown:
            raise EncoderError(f"unknown encoder config keys {sorted(unknown)}")
        return cls(layers=tuple(tuple(layer) for layer in d["layers"]),
                   activation=d.get("activation", "gelu"),
                   norm=d.get("norm", NORM_FIRST),
                   input_rate_hz=int(d.get("input_rate_hz", 16000)),
                   feature_dim=int(d.get("feature_dim", 0)))


def tiny_config(channels=8, input_rate_hz=16000) -> EncoderConfig:
    """Two-layer desk-scale profile used throughout the tests."""
    return EncoderConfig(layers=((channels, 6, 3), (channels, 4, 2)),
                         input_rate_hz=input_rate_hz)


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # [F, T]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise EncoderError(f"feature map must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def feature_dim(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


class FeatureEncoder:
    """Immutable conv feature extractor.  Thread-safe for concurrent encode
    calls: no forward state lives on the instance."""

    def __init__(self, config: EncoderConfig, weights: dict):
        self.config = config
        self._validate(weights)
        self.weights = {k: np.asarray(v) for k, v in weights.items()}

    def _validate(self, weights):
        cfg = self.config
        expected = {}
        cin = 1
        for i, (cout, k, _) in enumerate(cfg.layers):
            expected[f"conv{i}.weight"] = (cout, cin, k)
            expected[f"conv{i}.bias"] = (cout,)
            cin = cout
        if cfg.norm == NORM_FIRST:
            c0 = cfg.layers[0][0]
            expected["norm0.gamma"] = (c0,)
            expected["norm0.beta"] = (c0,)
        missing = set(expected) - set(weights)
        extra = set(weights) - set(expected)
        if missing or extra:
            raise EncoderError(
                f"weights do not match config ({len(cfg.layers)} layers): "
                f"missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            got = tuple(np.asarray(weights[name]).shape)
            if got != shape:
                raise EncoderError(f"tensor {name}: shape {got}, config requires {shape}")

    # -- forward -----------------------------------------------------------

    def _check_input(self, s: AudioBuffer) -> np.ndarray:
        if s.n_channels != 1:
            raise EncoderError(f"encoder input must be mono, got {s.n_channels} channels")
        if s.sample_rate_hz != self.config.input_rate_hz:
            raise EncoderError(
                f"input at {s.sample_rate_hz} Hz; encoder expects {self.config.input_rate_hz} Hz "
                "(resample first)")
        rf = self.config.receptive_field
        if s.n_frames < rf:
            raise EncoderError(f"input of {s.n_frames} samples shorter than receptive field {rf}")
        return s.samples

    def _forward(self, x: np.ndarray, caches=None):
        w = self.weights
        for i, (_, k, stride) in enumerate(self.config.layers):
            x_in = x
            x = conv1d_forward(x, w[f"conv{i}.weight"], w[f"conv{i}.bias"], stride=stride)
            norm_cache = None
            if i == 0 and self.config.norm == NORM_FIRST:
                mu = x.mean(axis=0, keepdims=True)
                sig = np.sqrt(x.var(axis=0, keepdims=True) + LN_EPS)
                xhat = (x - mu) / sig
                x = w["norm0.gamma"][:, None] * xhat + w["norm0.beta"][:, None]
                norm_cache = (xhat, sig)
            pre_act = x
            x = gelu(x)
            if caches is not None:
                caches.append((x_in, norm_cache, pre_act))
        return x

    def encode(self, s: AudioBuffer) -> FeatureMap:
        return FeatureMap(self._forward(self._check_input(s)))

    def encode_with_cache(self, s: AudioBuffer):
        """Forward pass that also returns the per-layer cache needed by
        :meth:`backprop`.  The cache is owned by the caller, so concurrent
        calls stay independent."""
        caches = []
        feats = self._forward(self._check_input(s), caches)
        return FeatureMap(feats), caches

    def backprop(self, caches, upstream: np.ndarray) -> np.ndarray:
        """Pull an upstream [F, T] gradient back to the input samples."""
        g = np.asarray(upstream)
        w = self.weights
        for i in reversed(range(len(self.config.layers))):
            x_in, norm_cache, pre_act = caches[i]
            # through GELU
            t = np.tanh(GELU_C0 * (pre_act + GELU_C1 * pre_act**3))
            du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * pre_act**2)
            g = g * (0.5 * (1.0 + t) + 0.5 * pre_act * (1.0 - t**2) * du)
            if norm_cache is not None:
                xhat, sig = norm_cache
                gh = g * w["norm0.gamma"][:, None]
                g = (gh - gh.mean(axis=0, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=0, keepdims=True)) / sig
            g, _, _ = conv1d_backward(g, x_in, w[f"conv{i}.weight"],
                                      stride=self.config.layers[i][2], need_weight=False)
        return g[0]

    def encode_grad(self, s: AudioBuffer, upstream: np.ndarray):
        """Gradient of sum(features * upstream) with respect to the input
        samples.  Returns (FeatureMap, grad) with grad shaped [N]."""
        feats, caches = self.encode_with_cache(s)
        g = np.asarray(upstream)
        if g.shape != feats.values.shape:
            raise EncoderError(
                f"upstream gradient shape {g.shape} != features {feats.values.shape}")
        return feats, self.backprop(caches, g)

    # -- construction / persistence ---------------------------------------

    @classmethod
    def init_random(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "FeatureEncoder":
        rng = np.random.default_rng(seed)
        weights = {}
        cin = 1
        for i, (cout, k, _) in enumerate(config.layers):
            fan_in = cin * k
            bound = np.sqrt(6.0 / fan_in)
            weights[f"conv{i}.weight"] = rng.uniform(
                -bound, bound, size=(cout, cin, k)).astype(dtype)
            bb = 1.0 / np.sqrt(fan_in)
            weights[f"conv{i}.bias"] = rng.uniform(-bb, bb, size=cout).astype(dtype)
            cin = cout
        if config.norm == NORM_FIRST:
            c0 = config.layers[0][0]
            weights["norm0.gamma"] = np.ones(c0, dtype=dtype)
            weights["norm0.beta"] = np.zeros(c0, dtype=dtype)
        return cls(config, weights)

    def save(self, path) -> None:
        tensors = {"config_json": sewf.config_to_tensor(self.config.to_dict())}
        tensors.update(self.weights)
        sewf.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "FeatureEncoder":
        tensors = sewf.load_tensors(path)
        if "config_json" not in tensors:
            raise EncoderError("weight file has no config_json tensor")
        config = EncoderConfig.from_dict(sewf.tensor_to_config(tensors.pop("config_json")))
        return cls(config, tensors)

    def astype(self, dtype) -> "FeatureEncoder":
        return FeatureEncoder(self.config,
                              {k: v.astype(dtype) for k, v in self.weights.items()})
