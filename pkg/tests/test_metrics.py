import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percept.metrics import (FWSEG_CLAMP_DB, SI_SNR_CAP_DB, MetricError, MetricReport,
                             better_ear, delta_metric, fw_seg_snr, pearson, si_snr,
                             stoi)

RATE = 16000


def _speechish(seed, n=RATE):
    """Modulated multi-tone test signal with envelope structure."""
    r = np.random.default_rng(seed)
    t = np.arange(n) / RATE
    x = np.zeros(n)
    for f in (220.0, 440.0, 880.0):
        x += np.sin(2 * np.pi * f * t + r.uniform(0, 2 * np.pi))
    env = 0.5 * (1 + np.sin(2 * np.pi * 4.0 * t + r.uniform(0, 2 * np.pi)))
    return x * env * 0.1


class TestSiSnr:
    def test_perfect_estimate_capped(self, rng):
        s = rng.standard_normal(1000)
        assert si_snr(s, s.copy()) == SI_SNR_CAP_DB == 60.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, alpha):
        r = np.random.default_rng(seed)
        s = r.standard_normal(256)
        s_hat = s + 0.5 * r.standard_normal(256)
        assert abs(si_snr(s, s_hat) - si_snr(s, alpha * s_hat)) < 1e-9

    def test_orthogonal_noise_closed_form(self, rng):
        # zero-mean target plus zero-mean orthogonal noise: projection leaves
        # exactly the noise as error
        s = rng.standard_normal(4096)
        s -= s.mean()
        n = rng.standard_normal(4096)
        n -= n.mean()
        n -= (np.dot(n, s) / np.dot(s, s)) * s
        want = 10 * np.log10(np.dot(s, s) / np.dot(n, n))
        assert abs(si_snr(s, s + n) - want) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            si_snr(np.zeros(5), np.zeros(6))


class TestBetterEar:
    def test_orientations(self):
        assert better_ear(1.0, 2.0, "higher_better") == 2.0
        assert better_ear(1.0, 2.0, "lower_better") == 1.0

    def test_unknown_orientation(self):
        with pytest.raises(MetricError):
            better_ear(1.0, 2.0, "sideways")

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_bounds(self, a, b):
        hi = better_ear(a, b, "higher_better")
        lo = better_ear(a, b, "lower_better")
        assert hi == max(a, b) and lo == min(a, b)


class TestStoi:
    def test_self_is_one(self):
        s = _speechish(0)
        assert abs(stoi(s, s.copy(), RATE) - 1.0) < 1e-6

    def test_sign_flip_is_one(self):
        # band envelopes are magnitude-based, so polarity cannot matter
        s = _speechish(1)
        assert abs(stoi(s, -s, RATE) - 1.0) < 1e-6

    def test_monotone_in_snr(self, rng):
        s = _speechish(2)
        noise = rng.standard_normal(len(s))
        noise *= np.linalg.norm(s) / np.linalg.norm(noise)
        vals = []
        for snr_db in (-5.0, 0.0, 5.0, 10.0):
            s_hat = s + noise * 10 ** (-snr_db / 20)
            vals.append(stoi(s, s_hat, RATE))
        assert all(b > a for a, b in zip(vals, vals[1:])), vals
        assert 0.0 <= vals[0] < vals[-1] <= 1.0

    def test_too_short_raises(self):
        with pytest.raises(MetricError):
            stoi(np.zeros(100), np.zeros(100), RATE)


class TestFwSegSnr:
    def test_perfect_estimate_hits_upper_clamp(self):
        s = _speechish(3)
        assert fw_seg_snr(s, s.copy(), RATE) == FWSEG_CLAMP_DB[1] == 35.0

    def test_clamp_bounds_adversarial(self, rng):
        s = _speechish(4)
        lo, hi = FWSEG_CLAMP_DB
        # estimates engineered to push per-frame SNR to both extremes
        for s_hat in (np.zeros_like(s), -s, s + 1000.0 * rng.standard_normal(len(s)),
                      1e-12 * s):
            v = fw_seg_snr(s, s_hat, RATE)
            assert lo <= v <= hi

    def test_quiet_noise_near_top(self, rng):
        s = _speechish(5)
        noisy = s + 10 ** (-40 / 20) * np.std(s) * rng.standard_normal(len(s))
        assert fw_seg_snr(s, noisy, RATE) > 15.0


class TestPearson:
    def test_matches_corrcoef(self, rng):
        x, y = rng.standard_normal(50), rng.standard_normal(50)
        assert abs(pearson(x, y) - np.corrcoef(x, y)[0, 1]) < 1e-12

    def test_perfect_correlation(self):
        x = np.arange(10.0)
        assert abs(pearson(x, 2 * x + 3) - 1.0) < 1e-12
        assert abs(pearson(x, -x) - (-1.0)) < 1e-12

    def test_zero_variance_raises(self):
        with pytest.raises(MetricError):
            pearson(np.ones(5), np.arange(5.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_bounded(self, seed):
        r = np.random.default_rng(seed)
        assert abs(pearson(r.standard_normal(20), r.standard_normal(20))) <= 1.0 + 1e-12


class TestDeltaMetric:
    def test_identity_reference_is_zero(self):
        s = _speechish(6)
        assert delta_metric(si_snr, s, s + 0.01, s + 0.01) == 0.0

    def test_improvement_positive(self, rng):
        s = _speechish(7)
        noise = 0.3 * rng.standard_normal(len(s))
        assert delta_metric(si_snr, s, s + 0.01 * noise, s + noise) > 0


class TestMetricReport:
    def test_means_and_csv(self):
        rep = MetricReport()
        rep.add("a", {"si_snr": 10.0, "stoi": 0.8})
        rep.add("b", {"si_snr": 12.0, "stoi": 0.9})
        rep.finalize()
        assert abs(rep.means["si_snr"] - 11.0) < 1e-12
        assert abs(rep.means["stoi"] - 0.85) < 1e-12
        csv_text = rep.to_csv()
        assert csv_text.splitlines()[0] == "sample_id,si_snr,stoi"
        assert len(csv_text.splitlines()) == 3

    def test_non_finite_excluded_from_means(self):
        rep = MetricReport()
        rep.add("a", {"m": 1.0})
        rep.add("b", {"m": float("nan")})
        rep.finalize()
        assert rep.means["m"] == 1.0
