"""Synthetic multi-microphone scene generation.

A scene is: a deterministic pseudo-source as target, 1-3 interferer
sources, per-source microphone rendering (fractional-sample delays and
gains per mic), interferer gains chosen so the reference-channel SNR hits
the requested value exactly, and an exponential-decay noise reverb tail
convolved onto the mixture only.  The anechoic target at the two
reference mics (channels 0 and 1) is kept as the training target pair.

Everything is reproducible: one integer seed per scene drives source
synthesis, geometry, SNR draws and the reverb noise.  The manifest is a
JSON file that stores enough to re-render every scene bit-identically;
it can equally well point at externally supplied WAV files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from percept.audio import AudioBuffer, read_wav, write_wav

SOURCE_KINDS = ("am_tones", "chirp", "filtered_noise")
SOURCE_RMS = 0.1
SCHEMA_VERSION = 1

DELAY_HALF_TAPS = 32  # windowed-sinc support per side for fractional delays
KAISER_BETA = 8.6


class SceneError(Exception):
    pass


# --- sources ---------------------------------------------------------------


def _am_envelope(n, rate, rng, mod_hz=4.0):
    t = np.arange(n) / rate
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 * (1.0 + np.sin(2 * np.pi * mod_hz * t + phase))


def synth_source(kind: str, duration_s: float, seed: int,
                 sample_rate_hz: int = 16000) -> AudioBuffer:
    """Deterministic pseudo-source, RMS-normalized to 0.1.

    am_tones: three harmonics of a random fundamental under a 4 Hz
    amplitude modulation (gives STOI-style metrics an envelope to track).
    chirp: linear sweep.  filtered_noise: band-limited noise under the
    same 4 Hz envelope.
    """
    if duration_s <= 0:
        raise SceneError("duration must be positive")
    if kind not in SOURCE_KINDS:
        raise SceneError(f"unknown source kind {kind!r}; choose from {SOURCE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    if kind == "am_tones":
        f0 = rng.uniform(150.0, 300.0)
        x = np.zeros(n)
        for mult, amp in ((1.0, 1.0), (2.0, 0.7), (3.0, 0.5)):
            x += amp * np.sin(2 * np.pi * f0 * mult * t + rng.uniform(0, 2 * np.pi))
        x *= _am_envelope(n, sample_rate_hz, rng)
    elif kind == "chirp":
        f_lo = rng.uniform(150.0, 400.0)
        f_hi = rng.uniform(1500.0, 3000.0)
        rate_hzps = (f_hi - f_lo) / duration_s
        x = np.sin(2 * np.pi * (f_lo * t + 0.5 * rate_hzps * t ** 2))
        x *= _am_envelope(n, sample_rate_hz, rng)
    else:  # filtered_noise
        x = rng.standard_normal(n)
        spec = np.fft.rfft(x)
        f = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
        lo = rng.uniform(200.0, 500.0)
        hi = rng.uniform(1800.0, 3500.0)
        band = (f >= lo) & (f <= hi)
        spec[~band] = 0.0
        x = np.fft.irfft(spec, n)
        x *= _am_envelope(n, sample_rate_hz, rng)
    rms = math.sqrt(float(np.mean(x ** 2)))
    if rms == 0.0:
        raise SceneError("degenerate all-zero source")
    x *= SOURCE_RMS / rms
    return AudioBuffer(x[None].astype(np.float32), sample_rate_hz)


# --- spatialization --------------------------------------------------------


def _delay_kernel(frac: float) -> np.ndarray:
    # Windowed-sinc interpolator evaluated at j - frac, j in [-K, K].
    k = DELAY_HALF_TAPS
    j = np.arange(-k, k + 1, dtype=np.float64)
    taps = np.sinc(j - frac) * np.kaiser(2 * k + 1, KAISER_BETA)
    return taps / taps.sum()


def _fractional_delay(x: np.ndarray, delay: float) -> np.ndarray:
    if delay < 0:
        raise SceneError(f"negative delay {delay}")
    di = int(math.floor(delay))
    frac = delay - di
    n = len(x)
    if frac == 0.0:
        out = np.zeros(n)
        if di < n:
            out[di:] = x[: n - di]
        return out
    k = DELAY_HALF_TAPS
    full = np.convolve(x, _delay_kernel(frac))  # length n + 2k
    out = np.zeros(n)
    for i in range(n):
        src = i + k - di
        if 0 <= src < len(full):
            out[i] = full[src]
    return out


def spatialize(src: AudioBuffer, mic_delays, gains) -> AudioBuffer:
    """Render a mono source at C mics with per-mic delay (samples, may be
    fractional) and gain.  Channel 0 is the reference mic."""
    if src.n_channels != 1:
        raise SceneError("spatialize expects a mono source")
    mic_delays = [float(d) for d in mic_delays]
    gains = [float(g) for g in gains]
    if len(mic_delays) != len(gains):
        raise SceneError(f"{len(mic_delays)} delays vs {len(gains)} gains")
    x = src.samples[0].astype(np.float64)
    chans = [g * _fractional_delay(x, d) for d, g in zip(mic_delays, gains)]
    return AudioBuffer(np.stack(chans), src.sample_rate_hz)


def _fft_convolve_tail(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = len(x)
    size = 1 << (n + len(h) - 2).bit_length()
    out = np.fft.irfft(np.fft.rfft(x, size) * np.fft.rfft(h, size), size)
    return out[:n]


def _reverb_tail(dry: np.ndarray, rate: int, decay_s: float, tail_level: float,
                 seed: int) -> np.ndarray:
    """Per-channel convolution with an exponentially decaying noise IR.
    The IR has no direct tap (h[0] = 0) and total energy tail_level, so the
    direct-to-reverb energy ratio is -10*log10(tail_level) dB."""
    c, n = dry.shape
    k = max(2, int(round(3.0 * decay_s * rate)))
    decay = np.exp(-3.0 * np.arange(k) / (decay_s * rate))
    tails = np.empty_like(dry)
    for ch in range(c):
        rng = np.random.default_rng((seed, ch))
        h = rng.standard_normal(k) * decay
        h[0] = 0.0
        e = float(np.sum(h ** 2))
        if e > 0:
            h *= math.sqrt(tail_level / e)
        tails[ch] = _fft_convolve_tail(dry[ch], h)
    return tails


# --- manifest --------------------------------------------------------------


@dataclass
class SceneManifest:
    scene_id: str
    split: str
    target_path: str
    interferer_paths: list
    snr_db: list
    mic_count: int
    geometry_seed: int
    sample_rate_hz: int
    rir: dict
    label: Optional[float] = None

    def __post_init__(self):
        if not 1 <= len(self.interferer_paths) <= 3:
            raise SceneError(
                f"{self.scene_id}: need 1-3 interferers, got {len(self.interferer_paths)}")
        if len(self.snr_db) != len(self.interferer_paths):
            raise SceneError(f"{self.scene_id}: one snr_db per interferer required")
        if self.mic_count < 1:
            raise SceneError(f"{self.scene_id}: mic_count must be >= 1")
        if self.split not in ("train", "val", "test"):
            raise SceneError(f"{self.scene_id}: unknown split {self.split!r}")
        if self.label is not None and not 0.0 <= self.label <= 1.0:
            raise SceneError(f"{self.scene_id}: label must be in [0, 1]")
        for key in ("decay_s", "tail_level", "reverb_seed", "target_delays", "target_gains",
                    "interferer_delays", "interferer_gains"):
            if key not in self.rir:
                raise SceneError(f"{self.scene_id}: rir missing {key!r}")
        if len(self.rir["target_delays"]) != self.mic_count:
            raise SceneError(f"{self.scene_id}: need one target delay per mic")

    def to_dict(self) -> dict:
        d = {"scene_id": self.scene_id, "split": self.split,
             "target_path": self.target_path,
             "interferer_paths": list(self.interferer_paths),
             "snr_db": [float(v) for v in self.snr_db],
             "mic_count": self.mic_count, "geometry_seed": self.geometry_seed,
             "sample_rate_hz": self.sample_rate_hz, "rir": self.rir}
        if self.label is not None:
            d["label"] = float(self.label)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        known = {"scene_id", "split", "target_path", "interferer_paths", "snr_db",
                 "mic_count", "geometry_seed", "sample_rate_hz", "rir", "label"}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene keys {sorted(unknown)}")
        return cls(**{k: d[k] for k in d})


def save_manifest(path, scenes) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "scenes": [s.to_dict() for s in scenes]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    """Returns (scenes, base_dir); source paths are relative to base_dir."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise SceneError("manifest has no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SceneError(f"unsupported manifest schema {doc['schema_version']}")
    scenes = [SceneManifest.from_dict(d) for d in doc["scenes"]]
    return scenes, os.path.dirname(os.path.abspath(path))


# --- mixing ----------------------------------------------------------------


@dataclass
class SceneAudio:
    mixture: AudioBuffer               # [C, N]
    target_l: AudioBuffer              # anechoic target at mic 0
    target_r: AudioBuffer              # anechoic target at mic 1 (mic 0 if C == 1)
    components: dict = field(default_factory=dict)


def _load_source(base_dir, rel_path, rate, n=None) -> np.ndarray:
    buf = read_wav(os.path.join(base_dir, rel_path))
    if buf.sample_rate_hz != rate:
        raise SceneError(f"{rel_path}: rate {buf.sample_rate_hz}, manifest says {rate}")
    x = buf.samples[0]
    if n is not None:
        x = np.pad(x, (0, max(0, n - len(x))))[:n]
    return x


def mix_scene(manifest: SceneManifest, base_dir) -> SceneAudio:
    """Deterministically re-render one scene from its manifest entry."""
    rate = manifest.sample_rate_hz
    tgt = _load_source(base_dir, manifest.target_path, rate)
    n = len(tgt)
    rir = manifest.rir
    tgt_sp = spatialize(AudioBuffer(tgt[None], rate),
                        rir["target_delays"], rir["target_gains"]).samples
    ref_energy = float(np.sum(tgt_sp[0] ** 2))
    if ref_energy == 0.0:
        raise SceneError(f"{manifest.scene_id}: target silent at reference mic")

    interferers = []
    for i, rel in enumerate(manifest.interferer_paths):
        src = _load_source(base_dir, rel, rate, n)
        sp = spatialize(AudioBuffer(src[None], rate),
                        rir["interferer_delays"][i], rir["interferer_gains"][i]).samples
        ie = float(np.sum(sp[0] ** 2))
        if ie == 0.0:
            raise SceneError(f"{manifest.scene_id}: interferer {i} silent at reference mic")
        # gain making the reference-channel target/interferer ratio exact
        g = math.sqrt(ref_energy / (ie * 10.0 ** (manifest.snr_db[i] / 10.0)))
        interferers.append(g * sp)

    dry = tgt_sp.copy()
    for sp in interferers:
        dry += sp
    tail = _reverb_tail(dry, rate, rir["decay_s"], rir["tail_level"], rir["reverb_seed"])
    mixture = dry + tail

    c = manifest.mic_count
    r_idx = 1 if c > 1 else 0
    return SceneAudio(
        mixture=AudioBuffer(mixture.astype(np.float32), rate),
        target_l=AudioBuffer(tgt_sp[0:1].astype(np.float32), rate),
        target_r=AudioBuffer(tgt_sp[r_idx : r_idx + 1].astype(np.float32), rate),
        components={"target": tgt_sp, "interferers": interferers, "reverb": tail})


# --- dataset generation ----------------------------------------------------


DIFFICULTIES = ("cec1_like", "cec2_like")
_SNR_RANGE_DB = (0.0, 6.0)       # cec1_like; harder set sits 3 dB lower
_DECAY_S = 0.2
_TAIL_LEVEL = 0.1


def _label_from_snr(mean_snr_db: float) -> float:
    # strictly increasing in SNR, squashed into (0, 1)
    return 1.0 / (1.0 + math.exp(-mean_snr_db / 4.0))


def build_scene(scene_id: str, split: str, difficulty: str, seed_pair,
                sample_rate_hz: int, duration_s: float, mic_count: int,
                with_labels: bool, out_dir) -> SceneManifest:
    """Generate one scene's source files and manifest entry.  Pure function
    of its arguments, so scenes can be built concurrently."""
    rng = np.random.default_rng(seed_pair)
    n_interf = 1 if difficulty == "cec1_like" else int(rng.integers(2, 4))
    lo, hi = _SNR_RANGE_DB
    if difficulty == "cec2_like":
        lo, hi = lo - 3.0, hi - 3.0
    snrs = [float(round(rng.uniform(lo, hi), 3)) for _ in range(n_interf)]

    kinds = list(SOURCE_KINDS)
    tgt_kind = kinds[int(rng.integers(len(kinds)))]
    src_seed = int(rng.integers(2 ** 31))
    target = synth_source(tgt_kind, duration_s, src_seed, sample_rate_hz)
    os.makedirs(os.path.join(out_dir, "sources"), exist_ok=True)
    tgt_rel = os.path.join("sources", f"{scene_id}_target.wav")
    write_wav(target, os.path.join(out_dir, tgt_rel), encoding="float32")

    interferer_rels = []
    for j in range(n_interf):
        kind = kinds[int(rng.integers(len(kinds)))]
        buf = synth_source(kind, duration_s, int(rng.integers(2 ** 31)), sample_rate_hz)
        rel = os.path.join("sources", f"{scene_id}_interf{j}.wav")
        write_wav(buf, os.path.join(out_dir, rel), encoding="float32")
        interferer_rels.append(rel)

    geometry_seed = int(rng.integers(2 ** 31))
    geo = np.random.default_rng(geometry_seed)
    tgt_delays = [0.0] + [float(round(geo.uniform(0.0, 4.0), 4))
                          for _ in range(mic_count - 1)]
    tgt_gains = [1.0] + [float(round(geo.uniform(0.7, 1.0), 4))
                         for _ in range(mic_count - 1)]
    int_delays = [[float(round(geo.uniform(0.0, 4.0), 4)) for _ in range(mic_count)]
                  for _ in range(n_interf)]
    int_gains = [[float(round(geo.uniform(0.7, 1.0), 4)) for _ in range(mic_count)]
                 for _ in range(n_interf)]
    rir = {"decay_s": _DECAY_S, "tail_level": _TAIL_LEVEL,
           "reverb_seed": int(rng.integers(2 ** 31)),
           "target_delays": tgt_delays, "target_gains": tgt_gains,
           "interferer_delays": int_delays, "interferer_gains": int_gains}
    label = _label_from_snr(float(np.mean(snrs))) if with_labels else None
    return SceneManifest(scene_id=scene_id, split=split, target_path=tgt_rel,
                         interferer_paths=interferer_rels, snr_db=snrs,
                         mic_count=mic_count, geometry_seed=geometry_seed,
                         sample_rate_hz=sample_rate_hz, rir=rir, label=label)


def generate_dataset(counts: dict, difficulty: str, seed: int, out_dir,
                     sample_rate_hz: int = 16000, duration_s: float = 2.0,
                     mic_count: int = 6, with_labels: bool = False,
                     workers: int = 1) -> str:
    """Write WAV sources for every scene plus one manifest.json; returns the
    manifest path.  Deterministic per seed regardless of worker count."""
    if difficulty not in DIFFICULTIES:
        raise SceneError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    idx = 0
    for split in ("train", "val", "test"):
        for i in range(int(counts.get(split, 0))):
            jobs.append((f"{split}_{i:04d}", split, idx))
            idx += 1

    def run(job):
        scene_id, split, j = job
        return build_scene(scene_id, split, difficulty, (seed, j), sample_rate_hz,
                           duration_s, mic_count, with_labels, out_dir)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(run, jobs))
    else:
        scenes = [run(j) for j in jobs]
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, scenes)
    return manifest_path
