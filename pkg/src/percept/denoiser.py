"""Multi-channel masking denoiser.

Time-domain structure: a linear spectral encoder frames the reference
channel (conv, kernel L, stride L/2); a spatial encoder convolves all C
input channels with C x L kernels at the same stride, so both encoders
emit the same frame count and concatenate channel-wise.  A stack of
dilated depthwise-separable conv blocks (residual + skip paths) estimates
a sigmoid mask over the spectral channels; the masked spectrum is
returned to the waveform by a transposed conv with overlap-add.

Length preservation: the input is padded by L - L/2 on the left and
enough on the right to land on a whole frame; the decoder output is
cropped back to the original N samples.  With stride L/2 every retained
sample is covered by exactly two analysis frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from percept import sewf
from percept.audio import AudioBuffer
from percept.nn.core import Parameter
from percept.nn.layers import (
    Conv1d,
    ConvTranspose1d,
    ElementwiseMul,
    GlobalLayerNorm,
    PReLU,
    Sigmoid,
    SpatialConv2d,
)


class DenoiserError(Exception):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    n_spectral_filters: int = 256
    n_spatial_filters: int = 128
    frame_len: int = 20
    bottleneck_channels: int = 256
    block_channels: int = 512
    tcn_kernel: int = 3
    dilations: tuple = (1, 2, 4, 8, 16, 32)
    repeats: int = 4
    n_mics: int = 6
    mask_activation: str = "sigmoid"
    sample_rate_hz: int = 22050

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.frame_len < 2 or self.frame_len % 2:
            raise DenoiserError(f"frame_len must be even and >= 2, got {self.frame_len}")
        if self.tcn_kernel % 2 != 1:
            raise DenoiserError(f"tcn_kernel must be odd, got {self.tcn_kernel}")
        if self.mask_activation != "sigmoid":
            raise DenoiserError(f"unsupported mask_activation {self.mask_activation!r}")
        for f in ("n_spectral_filters", "n_spatial_filters", "bottleneck_channels",
                  "block_channels", "repeats", "n_mics", "sample_rate_hz"):
            if getattr(self, f) < 1:
                raise DenoiserError(f"{f} must be positive")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise DenoiserError("dilations must be positive")

    @property
    def stride(self) -> int:
        return self.frame_len // 2

    def tcn_receptive_field_frames(self) -> int:
        return 1 + (self.tcn_kernel - 1) * self.repeats * sum(self.dilations)

    def to_dict(self) -> dict:
        return {"n_spectral_filters": self.n_spectral_filters,
                "n_spatial_filters": self.n_spatial_filters,
                "frame_len": self.frame_len,
                "bottleneck_channels": self.bottleneck_channels,
                "block_channels": self.block_channels,
                "tcn_kernel": self.tcn_kernel,
                "dilations": list(self.dilations),
                "repeats": self.repeats,
                "n_mics": self.n_mics,
                "mask_activation": self.mask_activation,
                "sample_rate_hz": self.sample_rate_hz}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {"n_spectral_filters", "n_spatial_filters", "frame_len",
                 "bottleneck_channels", "block_channels", "tcn_kernel", "dilations",
                 "repeats", "n_mics", "mask_activation", "sample_rate_hz"}
        unknown = set(d) - known
        if unknown:
            raise DenoiserError(f"unknown denoiser config keys {sorted(unknown)}")
        kw = dict(d)
        if "dilations" in kw:
            kw["dilations"] = tuple(kw["dilations"])
        return cls(**kw)


def tiny_denoiser_config(n_mics=2, sample_rate_hz=16000) -> DenoiserConfig:
    """Desk-scale config used by gradient checks and the overfit test."""
    return DenoiserConfig(n_spectral_filters=16, n_spatial_filters=8, frame_len=16,
                          bottleneck_channels=12, block_channels=16, tcn_kernel=3,
                          dilations=(1, 2), repeats=1, n_mics=n_mics,
                          sample_rate_hz=sample_rate_hz)


def param_count(cfg: DenoiserConfig) -> int:
    """Exact scalar-parameter count for a config, by conv arithmetic."""
    s, p, L = cfg.n_spectral_filters, cfg.n_spatial_filters, cfg.frame_len
    b, h, k = cfg.bottleneck_channels, cfg.block_channels, cfg.tcn_kernel
    total = s * L + s                      # spectral encoder
    total += p * cfg.n_mics * L + p        # spatial encoder
    total += b * (s + p) + b               # bottleneck 1x1
    per_block = (h * b + h) + 1 + 2 * h    # in 1x1, prelu, norm
    per_block += (h * k + h) + 1 + 2 * h   # depthwise, prelu, norm
    per_block += 2 * (b * h + b)           # residual + skip 1x1
    total += per_block * cfg.repeats * len(cfg.dilations)
    total += 1 + (s * b + s)               # mask prelu + 1x1
    total += s * L + 1                     # decoder
    return total


class _Block:
    """One dilated depthwise-separable unit with residual and skip outputs."""

    def __init__(self, cfg, dilation, rng, dtype):
        h, b, k = cfg.block_channels, cfg.bottleneck_channels, cfg.tcn_kernel
        self.conv_in = Conv1d(b, h, 1, rng=rng, dtype=dtype)
        self.prelu_in = PReLU(dtype=dtype)
        self.norm_in = GlobalLayerNorm(h, dtype=dtype)
        self.dw = Conv1d(h, h, k, dilation=dilation, groups=h,
                         pad=(k - 1) * dilation // 2, rng=rng, dtype=dtype)
        self.prelu_dw = PReLU(dtype=dtype)
        self.norm_dw = GlobalLayerNorm(h, dtype=dtype)
        self.conv_res = Conv1d(h, b, 1, rng=rng, dtype=dtype)
        self.conv_skip = Conv1d(h, b, 1, rng=rng, dtype=dtype)

    def layers(self):
        return {"in": self.conv_in, "in_prelu": self.prelu_in, "in_norm": self.norm_in,
                "dw": self.dw, "dw_prelu": self.prelu_dw, "dw_norm": self.norm_dw,
                "res": self.conv_res, "skip": self.conv_skip}

    def forward(self, y):
        h = self.norm_in.forward(self.prelu_in.forward(self.conv_in.forward(y)))
        h = self.norm_dw.forward(self.prelu_dw.forward(self.dw.forward(h)))
        return y + self.conv_res.forward(h), self.conv_skip.forward(h)

    def backward(self, g_y, g_skip):
        g_h = self.conv_res.backward(g_y) + self.conv_skip.backward(g_skip)
        g_h = self.dw.backward(self.prelu_dw.backward(self.norm_dw.backward(g_h)))
        g_in = self.conv_in.backward(self.prelu_in.backward(self.norm_in.backward(g_h)))
        return g_y + g_in


class DenoiserModel:
    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        cfg = config
        rng = np.random.default_rng(seed)
        self.spectral = Conv1d(1, cfg.n_spectral_filters, cfg.frame_len,
                               stride=cfg.stride, rng=rng, dtype=dtype)
        self.spatial = SpatialConv2d(cfg.n_mics, cfg.n_spatial_filters, cfg.frame_len,
                                     stride=cfg.stride, rng=rng, dtype=dtype)
        self.bottleneck = Conv1d(cfg.n_spectral_filters + cfg.n_spatial_filters,
                                 cfg.bottleneck_channels, 1, rng=rng, dtype=dtype)
        self.blocks = []
        for r in range(cfg.repeats):
            for d in cfg.dilations:
                self.blocks.append(_Block(cfg, d, rng, dtype))
        self.mask_prelu = PReLU(dtype=dtype)
        self.mask_conv = Conv1d(cfg.bottleneck_channels, cfg.n_spectral_filters, 1,
                                rng=rng, dtype=dtype)
        self.mask_act = Sigmoid()
        self.mul = ElementwiseMul()
        self.decoder = ConvTranspose1d(cfg.n_spectral_filters, 1, cfg.frame_len,
                                       stride=cfg.stride, rng=rng, dtype=dtype)
        self._shape_cache = None

    # -- parameter plumbing ------------------------------------------------

    def _layer_map(self):
        layers = {"spectral": self.spectral, "spatial": self.spatial,
                  "bottleneck": self.bottleneck}
        nd = len(self.config.dilations)
        for i, blk in enumerate(self.blocks):
            prefix = f"block{i // nd}_{i % nd}"
            for name, layer in blk.layers().items():
                layers[f"{prefix}.{name}"] = layer
        layers["mask_prelu"] = self.mask_prelu
        layers["mask"] = self.mask_conv
        layers["decoder"] = self.decoder
        return layers

    def parameters(self) -> dict:
        out = {}
        for lname, layer in self._layer_map().items():
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    # -- forward / backward ------------------------------------------------

    def _padding(self, n: int):
        cfg = self.config
        pl = cfg.frame_len - cfg.stride
        core = n + 2 * pl - cfg.frame_len
        extra = (-core) % cfg.stride
        return pl, pl + extra

    def forward(self, x) -> "AudioBuffer | np.ndarray":
        buf = isinstance(x, AudioBuffer)
        if buf:
            if x.sample_rate_hz != self.config.sample_rate_hz:
                raise DenoiserError(
                    f"input at {x.sample_rate_hz} Hz, model expects {self.config.sample_rate_hz}")
            arr = x.samples
        else:
            arr = np.asarray(x)
        cfg = self.config
        if arr.ndim != 2 or arr.shape[0] != cfg.n_mics:
            raise DenoiserError(f"expected [{cfg.n_mics}, N] input, got {arr.shape}")
        n = arr.shape[1]
        if n < cfg.frame_len:
            raise DenoiserError(f"input of {n} samples shorter than frame_len {cfg.frame_len}")
        arr = arr.astype(self.dtype, copy=False)
        pl, pr = self._padding(n)
        xp = np.pad(arr, ((0, 0), (pl, pr)))

        u = self.spectral.forward(xp[:1])
        v = self.spatial.forward(xp[None])[:, 0, :]
        y = self.bottleneck.forward(np.concatenate([u, v], axis=0))
        skip_sum = None
        for blk in self.blocks:
            y, skip = blk.forward(y)
            skip_sum = skip if skip_sum is None else skip_sum + skip
        m = self.mask_act.forward(self.mask_conv.forward(self.mask_prelu.forward(skip_sum)))
        masked = self.mul.forward(m, u)
        out = self.decoder.forward(masked)
        shat = out[:, pl : pl + n]
        self._shape_cache = (n, pl, pr)
        if buf:
            return AudioBuffer(shat, self.config.sample_rate_hz)
        return shat

    def backward(self, grad_shat) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient [C, N]."""
        if self._shape_cache is None:
            raise RuntimeError("backward called without a cached forward")
        n, pl, pr = self._shape_cache
        self._shape_cache = None
        g = np.asarray(grad_shat, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None]
        if g.shape != (1, n):
            raise DenoiserError(f"grad shape {g.shape}, expected (1, {n})")
        g_out = np.zeros((1, n + pl + pr), dtype=self.dtype)
        g_out[:, pl : pl + n] = g

        g_masked = self.decoder.backward(g_out)
        g_m, g_u_mul = self.mul.backward(g_masked)
        g_skip_sum = self.mask_prelu.backward(
            self.mask_conv.backward(self.mask_act.backward(g_m)))
        g_y = None
        for blk in reversed(self.blocks):
            g_y = blk.backward(
                g_y if g_y is not None else np.zeros_like(g_skip_sum), g_skip_sum)
        g_feats = self.bottleneck.backward(g_y)
        s = self.config.n_spectral_filters
        g_u = g_u_mul + g_feats[:s]
        g_xp_spec = self.spectral.backward(g_u)
        g_xp = self.spatial.backward(g_feats[s:][:, None, :])[0]
        g_xp[0] += g_xp_spec[0]
        return g_xp[:, pl : pl + n]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        tensors = {"config_json": sewf.config_to_tensor(self.config.to_dict())}
        for name, p in self.parameters().items():
            tensors[name] = p.value
        sewf.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        tensors = sewf.load_tensors(path)
        if "config_json" not in tensors:
            raise DenoiserError("model file has no config_json tensor")
        cfg = DenoiserConfig.from_dict(sewf.tensor_to_config(tensors.pop("config_json")))
        dtypes = {t.dtype for t in tensors.values()}
        if len(dtypes) > 1:
            raise DenoiserError(f"mixed tensor dtypes in model file: {sorted(map(str, dtypes))}")
        model = cls(cfg, seed=0, dtype=dtypes.pop() if dtypes else np.float32)
        params = model.parameters()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise DenoiserError(f"model file does not match config: missing {sorted(missing)}, "
                                f"unexpected {sorted(extra)}")
        for name, p in params.items():
            t = tensors[name]
            if t.shape != p.value.shape:
                raise DenoiserError(
                    f"tensor {name}: shape {t.shape}, config requires {p.value.shape}")
            p.value = t
        return model

    def astype(self, dtype) -> "DenoiserModel":
        clone = DenoiserModel(self.config, seed=0, dtype=dtype)
        own = self.parameters()
        for name, p in clone.parameters().items():
            p.value = own[name].value.astype(dtype)
        return clone
