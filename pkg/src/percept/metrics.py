"""Evaluation-only signal and intelligibility metrics.

None of these are differentiable or used as training objectives; they
score (reference, estimate) pairs after the fact.  Conventions that the
literature leaves open are pinned here and documented inline so the
numbers are reproducible:

* si_snr        -- scale-invariant SNR after optimal projection, capped at
                   +60 dB for (near-)perfect reconstruction.
* stoi          -- short-time objective intelligibility: 10 kHz, 256-pt
                   Hann frames at 50% overlap, silent-frame removal at
                   40 dB dynamic range, 15 one-third-octave bands from
                   150 Hz, 30-frame segments, -15 dB SDR clipping,
                   envelope correlation averaged over bands and segments.
* fw_seg_snr    -- frequency-weighted segmental SNR: 25 ms Hann frames at
                   10 ms hop, 23 mel bands spanning 50 Hz to 0.4*rate,
                   weights |S_b|^0.2, per-frame weighted average clamped
                   to [-10, 35] dB, mean over frames.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from percept.audio import AudioBuffer, resample

SI_SNR_CAP_DB = 60.0
STOI_RATE_HZ = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_DYN_RANGE_DB = 40.0
STOI_N_BANDS = 15
STOI_LOWEST_CF_HZ = 150.0
STOI_SEG_FRAMES = 30
STOI_CLIP = 10.0 ** (15.0 / 20.0)  # from the -15 dB lower SDR bound

FWSEG_N_BANDS = 23
FWSEG_GAMMA = 0.2
FWSEG_CLAMP_DB = (-10.0, 35.0)

_TINY = 1e-30


class MetricError(Exception):
    pass


def _pair(s, s_hat):
    a = s.samples[0] if isinstance(s, AudioBuffer) else np.asarray(s).reshape(-1)
    b = s_hat.samples[0] if isinstance(s_hat, AudioBuffer) else np.asarray(s_hat).reshape(-1)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a.astype(np.float64), b.astype(np.float64)


def si_snr(s, s_hat) -> float:
    """Scale-invariant SNR in dB (both signals zero-meaned first)."""
    a, b = _pair(s, s_hat)
    a = a - a.mean()
    b = b - b.mean()
    ea = float(np.dot(a, a))
    eb = float(np.dot(b, b))
    if ea == 0.0 or eb == 0.0:
        raise MetricError("zero-energy input")
    target = (np.dot(b, a) / ea) * a
    err = b - target
    et = float(np.dot(target, target))
    ee = float(np.dot(err, err))
    if ee <= et * 10.0 ** (-SI_SNR_CAP_DB / 10.0):
        return SI_SNR_CAP_DB
    return 10.0 * math.log10(et / ee)


def better_ear(score_l: float, score_r: float, orientation: str) -> float:
    """Pick the more favorable of the two per-ear scores."""
    if not (np.isfinite(score_l) and np.isfinite(score_r)):
        raise MetricError("non-finite ear scores")
    if orientation == "higher_better":
        return max(score_l, score_r)
    if orientation == "lower_better":
        return min(score_l, score_r)
    raise MetricError(f"unknown orientation {orientation!r}")


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.size < 2:
        raise MetricError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise MetricError("zero variance")
    return float(np.dot(dx, dy) / math.sqrt(vx * vy))


def delta_metric(metric, s, s_hat, x_ref, **kwargs) -> float:
    """metric(s, s_hat) - metric(s, x_ref): improvement over the
    unprocessed reference channel."""
    return metric(s, s_hat, **kwargs) - metric(s, x_ref, **kwargs)


# --- STOI ------------------------------------------------------------------


def _hann_periodic(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frame(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - frame) // hop if len(x) >= frame else 0
    (sn,) = x.strides
    return as_strided(x, shape=(n_frames, frame), strides=(hop * sn, sn))


def _third_octave_matrix(rate: int, nfft: int):
    f = np.linspace(0, rate / 2, nfft // 2 + 1)
    cf = STOI_LOWEST_CF_HZ * 2.0 ** (np.arange(STOI_N_BANDS) / 3.0)
    obm = np.zeros((STOI_N_BANDS, len(f)))
    for i in range(STOI_N_BANDS):
        lo = int(np.argmin((f - cf[i] / 2 ** (1 / 6)) ** 2))
        hi = int(np.argmin((f - cf[i] * 2 ** (1 / 6)) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _remove_silent_frames(a: np.ndarray, b: np.ndarray, frame: int, hop: int):
    w = _hann_periodic(frame)
    fa = _frame(a, frame, hop) * w
    fb = _frame(b, frame, hop) * w
    if len(fa) == 0:
        raise MetricError("signal shorter than one analysis frame")
    energies = 20.0 * np.log10(np.linalg.norm(fa, axis=1) + _TINY)
    keep = energies > energies.max() - STOI_DYN_RANGE_DB
    fa, fb = fa[keep], fb[keep]
    n = (len(fa) - 1) * hop + frame if len(fa) else 0
    out_a = np.zeros(n)
    out_b = np.zeros(n)
    for i in range(len(fa)):  # overlap-add of the kept frames, gaps closed
        out_a[i * hop : i * hop + frame] += fa[i]
        out_b[i * hop : i * hop + frame] += fb[i]
    return out_a, out_b


def stoi(s, s_hat, sample_rate_hz: int) -> float:
    """Short-time objective intelligibility of s_hat against clean s."""
    a, b = _pair(s, s_hat)
    if len(a) < sample_rate_hz // 2:
        raise MetricError(f"need at least 0.5 s of audio, got {len(a) / sample_rate_hz:.3f} s")
    if sample_rate_hz != STOI_RATE_HZ:
        a = resample(AudioBuffer(a[None], sample_rate_hz), STOI_RATE_HZ).samples[0]
        b = resample(AudioBuffer(b[None], sample_rate_hz), STOI_RATE_HZ).samples[0]
    hop = STOI_FRAME // 2
    a, b = _remove_silent_frames(a, b, STOI_FRAME, hop)

    w = _hann_periodic(STOI_FRAME)
    fa = _frame(a, STOI_FRAME, hop) * w
    fb = _frame(b, STOI_FRAME, hop) * w
    if len(fa) < STOI_SEG_FRAMES:
        raise MetricError(
            f"too short after silence removal: {len(fa)} frames < {STOI_SEG_FRAMES}")
    obm = _third_octave_matrix(STOI_RATE_HZ, STOI_NFFT)
    spec_a = np.abs(np.fft.rfft(fa, STOI_NFFT, axis=1)) ** 2
    spec_b = np.abs(np.fft.rfft(fb, STOI_NFFT, axis=1)) ** 2
    xa = np.sqrt(spec_a @ obm.T).T  # [bands, frames]
    xb = np.sqrt(spec_b @ obm.T).T

    total = 0.0
    count = 0
    for m in range(STOI_SEG_FRAMES, xa.shape[1] + 1):
        seg_a = xa[:, m - STOI_SEG_FRAMES : m]
        seg_b = xb[:, m - STOI_SEG_FRAMES : m]
        alpha = np.sqrt((seg_a ** 2).sum(axis=1, keepdims=True) /
                        ((seg_b ** 2).sum(axis=1, keepdims=True) + _TINY))
        clipped = np.minimum(alpha * seg_b, seg_a * (1.0 + STOI_CLIP))
        da = seg_a - seg_a.mean(axis=1, keepdims=True)
        db = clipped - clipped.mean(axis=1, keepdims=True)
        na = np.sqrt((da ** 2).sum(axis=1))
        nb = np.sqrt((db ** 2).sum(axis=1))
        valid = (na > _TINY) & (nb > _TINY)
        if valid.any():
            total += float(((da * db).sum(axis=1)[valid] / (na[valid] * nb[valid])).sum())
            count += int(valid.sum())
    if count == 0:
        raise MetricError("no segments with signal variance")
    return total / count


# --- frequency-weighted segmental SNR --------------------------------------


def _mel_filterbank(rate: int, nfft: int, n_bands: int, f_lo: float, f_hi: float):
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    pts = from_mel(np.linspace(to_mel(f_lo), to_mel(f_hi), n_bands + 2))
    bins = np.linspace(0, rate / 2, nfft // 2 + 1)
    fb = np.zeros((n_bands, len(bins)))
    for i in range(n_bands):
        left, center, right = pts[i], pts[i + 1], pts[i + 2]
        up = (bins - left) / max(center - left, _TINY)
        down = (right - bins) / max(right - center, _TINY)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def fw_seg_snr(s, s_hat, sample_rate_hz: int) -> float:
    """Frequency-weighted segmental SNR in dB."""
    a, b = _pair(s, s_hat)
    frame = int(round(0.025 * sample_rate_hz))
    hop = int(round(0.010 * sample_rate_hz))
    if len(a) < frame:
        raise MetricError("signal shorter than one analysis frame")
    nfft = 1 << (frame - 1).bit_length()
    w = _hann_periodic(frame)
    fa = _frame(a, frame, hop) * w
    fb = _frame(b, frame, hop) * w
    filt = _mel_filterbank(sample_rate_hz, nfft, FWSEG_N_BANDS, 50.0, 0.4 * sample_rate_hz)
    spec_a = np.abs(np.fft.rfft(fa, nfft, axis=1)) ** 2
    spec_d = np.abs(np.fft.rfft(fa - fb, nfft, axis=1)) ** 2
    e_ref = spec_a @ filt.T  # [frames, bands]
    e_err = spec_d @ filt.T

    lo, hi = FWSEG_CLAMP_DB
    vals = []
    for t in range(e_ref.shape[0]):
        good = e_ref[t] > 0.0
        if not good.any():
            continue  # silent reference frame carries no weight
        weights = e_ref[t, good] ** (FWSEG_GAMMA / 2.0)  # |S_b|^gamma
        snr_db = 10.0 * (np.log10(e_ref[t, good]) - np.log10(np.maximum(e_err[t, good], _TINY)))
        frame_db = float(np.dot(weights, snr_db) / weights.sum())
        vals.append(min(max(frame_db, lo), hi))
    if not vals:
        raise MetricError("no frames with reference energy")
    return float(np.mean(vals))


# --- report container ------------------------------------------------------


@dataclass
class MetricReport:
    """Per-sample metric table plus aggregate means.

    rows: one dict per sample, always containing 'sample_id'; remaining
    keys are metric names (absolute and/or delta forms).
    """

    rows: list = field(default_factory=list)
    means: dict = field(default_factory=dict)

    def add(self, sample_id: str, values: dict) -> None:
        self.rows.append({"sample_id": sample_id, **values})

    def finalize(self) -> "MetricReport":
        names = []
        for row in self.rows:
            for k in row:
                if k != "sample_id" and k not in names:
                    names.append(k)
        self.means = {}
        for name in names:
            vals = [row[name] for row in self.rows
                    if name in row and isinstance(row[name], (int, float))
                    and np.isfinite(row[name])]
            self.means[name] = float(np.mean(vals)) if vals else float("nan")
        return self

    def metric_names(self) -> list:
        seen = []
        for row in self.rows:
            for k in row:
                if k != "sample_id" and k not in seen:
                    seen.append(k)
        return seen

    def to_json(self) -> str:
        return json.dumps({"samples": self.rows, "means": self.means},
                          indent=2, sort_keys=False, allow_nan=True)

    def to_csv(self) -> str:
        names = self.metric_names()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id"] + names)
        for row in self.rows:
            writer.writerow([row["sample_id"]] + [row.get(n, "") for n in names])
        return buf.getvalue()

    def save(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            with open(json_path, "w") as fh:
                fh.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(self.to_csv())
