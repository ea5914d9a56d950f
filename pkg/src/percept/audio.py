"""Audio containers, WAV file I/O, resampling and channel selection.

Signals are stored as 2-D float arrays of shape ``[channels, frames]`` with an
integer sample rate.  All operations here are pure functions: they never
mutate their inputs and are safe to call concurrently.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided


class AudioError(Exception):
    """Raised for malformed audio data or unsupported WAV content."""


class ClippingWarning(UserWarning):
    """Emitted when samples are clamped to [-1, 1] during PCM16 encoding."""


@dataclass(frozen=True)
class AudioBuffer:
    """Multi-channel sampled signal.

    ``samples`` has shape ``[channels, frames]``; every channel has the same
    length.  Values must be finite.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise AudioError(f"samples must be 1-D or 2-D, got ndim={arr.ndim}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.size and not np.all(np.isfinite(arr)):
            raise AudioError("samples contain NaN or Inf")
        if not (isinstance(self.sample_rate_hz, (int, np.integer)) and self.sample_rate_hz > 0):
            raise AudioError(f"sample_rate_hz must be a positive integer, got {self.sample_rate_hz!r}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate_hz

    def channel(self, c: int) -> np.ndarray:
        """1-D view of channel ``c``."""
        return self.samples[c]

    def mono(self) -> np.ndarray:
        """1-D view of the only channel; errors if multi-channel."""
        if self.n_channels != 1:
            raise AudioError(f"expected mono buffer, got {self.n_channels} channels")
        return self.samples[0]


def select_channel(buf: AudioBuffer, c: int) -> AudioBuffer:
    """Single-channel buffer holding channel ``c`` of ``buf``."""
    if not 0 <= c < buf.n_channels:
        raise IndexError(f"channel {c} out of range for {buf.n_channels}-channel buffer")
    return AudioBuffer(buf.samples[c : c + 1].copy(), buf.sample_rate_hz)


# ---------------------------------------------------------------------------
# WAV I/O: RIFF little-endian, format tags 1 (PCM16) and 3 (IEEE float32).
# ---------------------------------------------------------------------------

_WAVE_PCM = 1
_WAVE_FLOAT = 3


def read_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file into an :class:`AudioBuffer`.

    PCM16 samples are normalized by 32768 to the [-1, 1] range; float32
    samples are taken as-is.  Other encodings are rejected.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise AudioError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise AudioError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise AudioError(f"{path}: missing fmt or data chunk")

    audio_format, channels, rate, _byte_rate, block_align, bits = fmt
    if channels < 1:
        raise AudioError(f"{path}: invalid channel count {channels}")
    if audio_format == _WAVE_PCM and bits == 16:
        flat = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == _WAVE_FLOAT and bits == 32:
        flat = np.frombuffer(data, dtype="<f4").astype(np.float32)
        if flat.size and not np.all(np.isfinite(flat)):
            raise AudioError(f"{path}: float32 data contains NaN or Inf")
    else:
        raise AudioError(
            f"{path}: unsupported encoding (format tag {audio_format}, {bits} bits);"
            " only PCM16 and float32 are handled"
        )
    if flat.size % channels:
        raise AudioError(f"{path}: data size is not a whole number of frames")
    samples = flat.reshape(-1, channels).T.copy()  # interleaved on disk -> [C, N]
    return AudioBuffer(samples, int(rate))


def write_wav(buf: AudioBuffer, path, encoding: str = "float32") -> None:
    """Write ``buf`` as RIFF/WAVE with ``encoding`` in {"pcm16", "float32"}.

    float32 round-trips bit-exactly through :func:`read_wav`; pcm16 is scaled
    by 32768 and clamped to the representable range (with a
    :class:`ClippingWarning` if any sample falls outside [-1, 1]).
    """
    if encoding == "float32":
        flat = np.ascontiguousarray(buf.samples.T, dtype="<f4").tobytes()
        fmt_tag, bits = _WAVE_FLOAT, 32
    elif encoding == "pcm16":
        x = buf.samples
        if x.size and (x.max(initial=-np.inf) > 1.0 or x.min(initial=np.inf) < -1.0):
            warnings.warn("samples outside [-1, 1] clamped for pcm16 encoding", ClippingWarning)
        ints = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
        flat = np.ascontiguousarray(ints.T).tobytes()
        fmt_tag, bits = _WAVE_PCM, 16
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    channels = buf.n_channels
    block_align = channels * bits // 8
    byte_rate = buf.sample_rate_hz * block_align
    fmt_body = struct.pack(
        "<HHIIHH", fmt_tag, channels, buf.sample_rate_hz, byte_rate, block_align, bits
    )
    if fmt_tag == _WAVE_FLOAT:
        fmt_body += struct.pack("<H", 0)  # cbSize; float format carries a fact chunk
        fact = b"fact" + struct.pack("<II", 4, buf.n_frames)
    else:
        fact = b""
    chunks = b"fmt " + struct.pack("<I", len(fmt_body)) + fmt_body
    chunks += fact
    chunks += b"data" + struct.pack("<I", len(flat)) + flat
    if len(flat) & 1:
        chunks += b"\x00"
    blob = b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks
    Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# Polyphase windowed-sinc resampler (Kaiser window, beta=8.6, 64 zero
# crossings per side).  The kernel is a fixed linear map, and its exact
# adjoint is available for gradient propagation through a rate change.
# ---------------------------------------------------------------------------

KAISER_BETA = 8.6
ZERO_CROSSINGS = 64


def _kaiser(v: np.ndarray) -> np.ndarray:
    # Window over normalized positions v in [-1, 1]; zero outside.
    inside = np.abs(v) <= 1.0
    w = np.zeros_like(v)
    w[inside] = np.i0(KAISER_BETA * np.sqrt(1.0 - v[inside] ** 2)) / np.i0(KAISER_BETA)
    return w


@lru_cache(maxsize=64)
def _phase_filters(up: int, down: int):
    """Per-phase filter bank for the rational rate change up/down.

    Returns ``(filters, bases, half)`` where ``filters[p]`` holds the taps
    for outputs with index ≡ p (mod up), applied to input samples starting at
    ``bases[p] - half`` (in unpadded coordinates).
    """
    ratio = min(1.0, up / down)  # low-pass scale when decimating
    half = int(math.ceil(ZERO_CROSSINGS / ratio)) + 1
    rel = np.arange(-half, half + 1, dtype=np.float64)
    filters = np.empty((up, rel.size))
    bases = np.empty(up, dtype=np.int64)
    for p in range(up):
        t = p * down / up
        base = math.floor(t)
        u = (t - base) - rel  # distance of output position to each tap
        v = ratio * u
        taps = ratio * np.sinc(v) * _kaiser(v / ZERO_CROSSINGS)
        taps /= taps.sum()  # unit DC gain per phase
        filters[p] = taps
        bases[p] = base
    return filters, bases, half


def _resample_length(n: int, source_hz: int, target_hz: int) -> int:
    return int(round(n * target_hz / source_hz))


def _resample_1d(x: np.ndarray, up: int, down: int, m: int) -> np.ndarray:
    filters, bases, half = _phase_filters(up, down)
    taps = filters.shape[1]
    n = x.shape[0]
    pad_right = half + down + taps
    xpad = np.concatenate([np.zeros(half), x.astype(np.float64), np.zeros(pad_right)])
    y = np.empty(m)
    step = xpad.strides[0]
    for p in range(up):
        mp = len(range(p, m, up))
        if mp == 0:
            continue
        view = as_strided(xpad[bases[p] :], shape=(mp, taps), strides=(down * step, step))
        y[p::up] = view @ filters[p]
    return y


def _resample_adjoint_1d(g: np.ndarray, up: int, down: int, n: int) -> np.ndarray:
    filters, bases, half = _phase_filters(up, down)
    taps = filters.shape[1]
    m = g.shape[0]
    pad_right = half + down + taps
    xhat = np.zeros(half + n + pad_right)
    for p in range(up):
        gp = g[p::up].astype(np.float64)
        if gp.size == 0:
            continue
        b = int(bases[p])
        for i in range(taps):
            xhat[b + i : b + i + gp.size * down : down] += filters[p, i] * gp
    return xhat[half : half + n]


def resample(buf: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Resample to ``target_hz``; identical rates return the input unchanged.

    Output length is ``round(N * target_hz / source_hz)``.
    """
    if target_hz <= 0:
        raise AudioError(f"target rate must be positive, got {target_hz}")
    if target_hz == buf.sample_rate_hz:
        return buf
    g = math.gcd(buf.sample_rate_hz, target_hz)
    up, down = target_hz // g, buf.sample_rate_hz // g
    m = _resample_length(buf.n_frames, buf.sample_rate_hz, target_hz)
    out = np.empty((buf.n_channels, m))
    for c in range(buf.n_channels):
        out[c] = _resample_1d(buf.samples[c], up, down, m)
    return AudioBuffer(out, target_hz)


def resample_adjoint(grad: np.ndarray, source_hz: int, target_hz: int, n_in: int) -> np.ndarray:
    """Adjoint of the ``source_hz -> target_hz`` resampling map.

    ``grad`` is a gradient with respect to the resampler output (length
    ``round(n_in * target_hz / source_hz)``); the result is the gradient with
    respect to the length-``n_in`` input.
    """
    if target_hz == source_hz:
        return np.asarray(grad, dtype=np.float64).copy()
    g = math.gcd(source_hz, target_hz)
    up, down = target_hz // g, source_hz // g
    expected = _resample_length(n_in, source_hz, target_hz)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (expected,):
        raise ValueError(f"grad has shape {grad.shape}, expected ({expected},)")
    return _resample_adjoint_1d(grad, up, down, n_in)
