import hashlib
import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percept.audio import AudioBuffer
from percept.scenes import (DIFFICULTIES, SOURCE_KINDS, SOURCE_RMS, SceneError,
                            SceneManifest, _fractional_delay, generate_dataset,
                            load_manifest, mix_scene, save_manifest, spatialize,
                            synth_source)


class TestSources:
    @pytest.mark.parametrize("kind", SOURCE_KINDS)
    def test_rms_normalized(self, kind):
        buf = synth_source(kind, 1.0, seed=3)
        rms = math.sqrt(float(np.mean(buf.samples.astype(np.float64) ** 2)))
        assert abs(rms - SOURCE_RMS) < 1e-6

    @pytest.mark.parametrize("kind", SOURCE_KINDS)
    def test_deterministic(self, kind):
        a = synth_source(kind, 0.5, seed=11)
        b = synth_source(kind, 0.5, seed=11)
        assert np.array_equal(a.samples, b.samples)
        c = synth_source(kind, 0.5, seed=12)
        assert not np.array_equal(a.samples, c.samples)

    def test_am_tones_spectrum_peaks_at_harmonics(self):
        seed = 7
        rng = np.random.default_rng(seed)
        f0 = rng.uniform(150.0, 300.0)  # same draw order as the generator
        buf = synth_source("am_tones", 2.0, seed)
        spec = np.abs(np.fft.rfft(buf.samples[0].astype(np.float64)))
        freqs = np.fft.rfftfreq(buf.n_frames, 1 / 16000)
        peaks = []
        for i in np.argsort(spec)[::-1]:
            if all(abs(freqs[i] - p) > 20 for p in peaks):
                peaks.append(float(freqs[i]))
            if len(peaks) == 3:
                break
        # 4 Hz AM puts sidebands within a few Hz of each harmonic
        for got, want in zip(sorted(peaks), (f0, 2 * f0, 3 * f0)):
            assert abs(got - want) < 8.0

    def test_unknown_kind(self):
        with pytest.raises(SceneError):
            synth_source("square", 1.0, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(SOURCE_KINDS), st.integers(0, 2 ** 31 - 1))
    def test_rms_property(self, kind, seed):
        buf = synth_source(kind, 0.3, seed)
        rms = math.sqrt(float(np.mean(buf.samples.astype(np.float64) ** 2)))
        assert abs(rms - SOURCE_RMS) < 1e-6


class TestSpatialize:
    def test_integer_delay_exact_shift(self, rng):
        x = rng.standard_normal(300)
        out = spatialize(AudioBuffer(x, 16000), [0.0, 5.0], [1.0, 0.8])
        assert np.array_equal(out.samples[0], x)
        assert np.allclose(out.samples[1][5:], 0.8 * x[:-5])
        assert np.all(out.samples[1][:5] == 0)

    def test_fractional_delay_phase(self):
        rate, f, d = 16000, 440.0, 2.5
        t = np.arange(4000) / rate
        x = np.sin(2 * np.pi * f * t)
        y = _fractional_delay(x, d)
        ref = np.sin(2 * np.pi * f * (t - d / rate))
        assert np.max(np.abs(y[200:-200] - ref[200:-200])) < 1e-3

    def test_negative_delay_rejected(self):
        with pytest.raises(SceneError):
            spatialize(AudioBuffer(np.zeros(10), 16000), [-1.0], [1.0])

    def test_requires_mono(self):
        with pytest.raises(SceneError):
            spatialize(AudioBuffer(np.zeros((2, 10)), 16000), [0.0], [1.0])


class TestManifest:
    def test_interferer_count_bounds(self):
        rir = {"decay_s": 0.1, "tail_level": 0.1, "reverb_seed": 0,
               "target_delays": [0.0], "target_gains": [1.0],
               "interferer_delays": [[0.0]], "interferer_gains": [[1.0]]}
        with pytest.raises(SceneError):
            SceneManifest("x", "train", "t.wav", [], [], 1, 0, 16000, rir)
        with pytest.raises(SceneError):
            SceneManifest("x", "train", "t.wav", ["a"] * 4, [0.0] * 4, 1, 0, 16000, rir)

    def test_label_range(self):
        rir = {"decay_s": 0.1, "tail_level": 0.1, "reverb_seed": 0,
               "target_delays": [0.0], "target_gains": [1.0],
               "interferer_delays": [[0.0]], "interferer_gains": [[1.0]]}
        with pytest.raises(SceneError):
            SceneManifest("x", "train", "t.wav", ["a.wav"], [0.0], 1, 0, 16000, rir,
                          label=1.5)

    def test_unknown_key_rejected(self):
        with pytest.raises(SceneError):
            SceneManifest.from_dict({"scene_id": "x", "surprise": 1})

    def test_round_trip_identity(self, dataset, tmp_path):
        manifest, scenes, _ = dataset
        again = tmp_path / "again.json"
        save_manifest(again, load_manifest(manifest)[0])
        assert open(manifest, "rb").read() == again.read_bytes()

    def test_schema_version_checked(self, dataset, tmp_path):
        manifest, _, _ = dataset
        doc = json.load(open(manifest))
        doc["schema_version"] = 99
        bad = tmp_path / "bad.json"
        json.dump(doc, open(bad, "w"))
        with pytest.raises(SceneError):
            load_manifest(bad)


class TestMixScene:
    def test_reference_snr_exact(self, dataset):
        _, scenes, base = dataset
        sc = scenes[0]
        sa = mix_scene(sc, base)
        et = float(np.sum(sa.components["target"][0] ** 2))
        for i, sp in enumerate(sa.components["interferers"]):
            got = 10 * math.log10(et / float(np.sum(sp[0] ** 2)))
            assert abs(got - sc.snr_db[i]) < 0.01

    def test_mixture_is_component_sum(self, dataset):
        _, scenes, base = dataset
        sa = mix_scene(scenes[0], base)
        resum = (sa.components["target"] + sum(sa.components["interferers"])
                 + sa.components["reverb"])
        assert np.max(np.abs(sa.mixture.samples.astype(np.float64) - resum)) < 1e-6

    def test_targets_are_anechoic_reference_channels(self, dataset):
        _, scenes, base = dataset
        sa = mix_scene(scenes[0], base)
        tgt = sa.components["target"]
        assert np.array_equal(sa.target_l.samples[0], tgt[0].astype(np.float32))
        assert np.array_equal(sa.target_r.samples[0], tgt[1].astype(np.float32))

    def test_reverb_level(self, dataset):
        _, scenes, base = dataset
        sa = mix_scene(scenes[0], base)
        dry = sa.components["target"] + sum(sa.components["interferers"])
        drr = 10 * np.log10(np.sum(dry ** 2) / np.sum(sa.components["reverb"] ** 2))
        assert 5.0 < drr < 15.0  # configured as a 10 dB direct-to-reverb ratio

    def test_missing_source_file(self, dataset, tmp_path):
        _, scenes, _ = dataset
        with pytest.raises(Exception):
            mix_scene(scenes[0], tmp_path)  # sources are not there


def _tree_digest(root, skip=()):
    h = hashlib.sha256()
    for dirp, _, files in sorted(os.walk(root)):
        for fn in sorted(files):
            if fn in skip:
                continue
            h.update(fn.encode())
            h.update(open(os.path.join(dirp, fn), "rb").read())
    return h.hexdigest()


class TestGenerateDataset:
    def test_split_sizes_and_ids(self, dataset):
        _, scenes, _ = dataset
        assert [s.split for s in scenes] == ["train"] * 2 + ["val"] + ["test"] * 3
        assert scenes[0].scene_id == "train_0000"
        assert scenes[3].scene_id == "test_0000"

    def test_labels_monotone_in_snr(self, dataset):
        _, scenes, _ = dataset
        pairs = sorted((float(np.mean(s.snr_db)), s.label) for s in scenes)
        for (snr_a, lab_a), (snr_b, lab_b) in zip(pairs, pairs[1:]):
            if snr_a != snr_b:
                assert lab_a < lab_b

    def test_byte_identical_across_worker_counts(self, tmp_path):
        counts = {"train": 2, "test": 1}
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(counts, "cec1_like", 3, a, duration_s=0.5, mic_count=2)
        generate_dataset(counts, "cec1_like", 3, b, duration_s=0.5, mic_count=2,
                         workers=3)
        assert _tree_digest(a) == _tree_digest(b)

    def test_seed_changes_output(self, tmp_path):
        counts = {"train": 1}
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(counts, "cec1_like", 3, a, duration_s=0.25, mic_count=1)
        generate_dataset(counts, "cec1_like", 4, b, duration_s=0.25, mic_count=1)
        assert _tree_digest(a) != _tree_digest(b)

    def test_cec2_like_harder(self, tmp_path):
        manifest = generate_dataset({"train": 5}, "cec2_like", 8, tmp_path,
                                    duration_s=0.25, mic_count=2)
        scenes, _ = load_manifest(manifest)
        assert all(2 <= len(s.interferer_paths) <= 3 for s in scenes)
        assert all(-3.0 <= v <= 3.0 for s in scenes for v in s.snr_db)
        assert "cec2_like" in DIFFICULTIES

    def test_unknown_difficulty(self, tmp_path):
        with pytest.raises(SceneError):
            generate_dataset({"train": 1}, "impossible", 0, tmp_path)
