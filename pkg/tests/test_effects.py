import numpy as np
import pytest
from scipy.signal import welch

from mixsep.audio_io import Waveform
from mixsep.effects import (
    WetDraw,
    WetParams,
    apply_contrast,
    apply_peaking_eq,
    apply_reverb,
    apply_wet_settings,
    draw_wet_settings,
    pink_noise,
    wet_chain,
)

from conftest import sine

SR = 44100


class TestPinkNoise:
    def test_zero_volume_zeros(self, rng):
        assert np.all(pink_noise(1000, 0.0, rng).samples == 0)

    def test_peak_equals_volume(self, rng):
        w = pink_noise(10000, 0.03, rng)
        assert np.abs(w.samples).max() == pytest.approx(0.03, rel=1e-12)

    def test_spectral_slope(self, rng):
        w = pink_noise(2**18, 1.0, rng)
        f, pxx = welch(w.samples, fs=SR, nperseg=4096)
        keep = (f >= 100) & (f <= 10000)
        slope = np.polyfit(np.log2(f[keep]), 10 * np.log10(pxx[keep]), 1)[0]
        assert -4.0 < slope < -2.0

    def test_bad_args(self, rng):
        with pytest.raises(ValueError):
            pink_noise(0, 0.1, rng)
        with pytest.raises(ValueError):
            pink_noise(100, -0.1, rng)

    def test_deterministic(self):
        a = pink_noise(500, 0.02, np.random.default_rng(5)).samples
        b = pink_noise(500, 0.02, np.random.default_rng(5)).samples
        assert np.array_equal(a, b)


class TestContrast:
    def test_zero_in_zero_out(self):
        out = apply_contrast(Waveform(np.zeros(100)), 35)
        assert np.all(out.samples == 0)

    def test_amount_one_near_identity(self):
        w = sine(440, 0.2, amp=0.8)
        out = apply_contrast(w, 1.0)
        rms_in = np.sqrt(np.mean(w.samples**2))
        rms_diff = np.sqrt(np.mean((out.samples - w.samples) ** 2))
        assert rms_diff / rms_in < 0.01

    def test_amount_70_boosts_half_scale_sine(self):
        w = sine(440, 0.2, amp=0.5)
        out = apply_contrast(w, 70.0)
        assert np.sqrt(np.mean(out.samples**2)) > np.sqrt(np.mean(w.samples**2))

    def test_monotone_on_grid(self):
        x = np.linspace(-1.0, 1.0, 4001)
        for amount in (1.0, 20.0, 70.0):
            y = apply_contrast(Waveform(x), amount).samples
            assert np.all(np.diff(y) >= 0)

    def test_odd_symmetry(self):
        x = np.linspace(-1, 1, 101)
        y = apply_contrast(Waveform(x), 40).samples
        assert np.allclose(y, -y[::-1], atol=1e-12)

    def test_out_of_range(self):
        for amount in (0.5, 71.0):
            with pytest.raises(ValueError):
                apply_contrast(Waveform(np.zeros(10)), amount)

    def test_length_preserved(self, rng):
        w = Waveform(rng.uniform(-1, 1, 777))
        assert len(apply_contrast(w, 30)) == 777


class TestPeakingEq:
    def test_zero_gain_identity(self, rng):
        w = Waveform(rng.standard_normal(5000) * 0.3)
        out = apply_peaking_eq(w, 1000.0, 0.0, 0.707)
        assert np.max(np.abs(out.samples - w.samples)) < 1e-9

    def test_plus_6db_at_center(self):
        w = sine(1000, 2.0, amp=0.2)
        out = apply_peaking_eq(w, 1000.0, 6.0, 0.707)
        tail = slice(SR, 2 * SR)  # steady state
        ratio = np.sqrt(np.mean(out.samples[tail] ** 2) / np.mean(w.samples[tail] ** 2))
        assert ratio == pytest.approx(10 ** (6 / 20), rel=0.02)

    def test_two_octaves_away_under_1db(self):
        w = sine(1000, 2.0, amp=0.2)
        out = apply_peaking_eq(w, 4000.0, 6.0, 0.707)
        tail = slice(SR, 2 * SR)
        change_db = 20 * np.log10(
            np.sqrt(np.mean(out.samples[tail] ** 2) / np.mean(w.samples[tail] ** 2))
        )
        assert abs(change_db) < 1.0

    def test_freq_out_of_range(self):
        w = Waveform(np.zeros(100))
        for freq in (0.0, SR / 2, SR):
            with pytest.raises(ValueError):
                apply_peaking_eq(w, freq, 3.0)

    def test_length_preserved(self, rng):
        w = Waveform(rng.standard_normal(1234))
        assert len(apply_peaking_eq(w, 500, -4.0)) == 1234


class TestReverb:
    def test_zero_in_zero_out(self):
        assert np.all(apply_reverb(Waveform(np.zeros(3000)), 50).samples == 0)

    def test_reverberance_one_near_dry(self, rng):
        w = Waveform(rng.standard_normal(SR) * 0.2)
        out = apply_reverb(w, 1.0)
        rms_in = np.sqrt(np.mean(w.samples**2))
        rms_diff = np.sqrt(np.mean((out.samples - w.samples) ** 2))
        assert rms_diff / rms_in < 0.02

    def test_impulse_tail_beyond_100ms(self):
        x = np.zeros(SR // 2)
        x[0] = 1.0
        out = apply_reverb(Waveform(x), 70.0)
        tail_energy = np.sum(out.samples[int(0.1 * SR) :] ** 2)
        assert tail_energy > 0

    def test_length_preserved(self, rng):
        w = Waveform(rng.standard_normal(10000))
        assert len(apply_reverb(w, 30)) == 10000

    def test_shorter_than_delays(self):
        out = apply_reverb(Waveform(np.ones(64) * 0.5), 40.0)
        assert len(out) == 64
        assert np.all(np.isfinite(out.samples))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            apply_reverb(Waveform(np.zeros(10)), 0.0)
        with pytest.raises(ValueError):
            apply_reverb(Waveform(np.zeros(10)), 71.0)


class TestWetChain:
    def test_all_draws_fail_identity(self):
        params = WetParams()
        w = sine(440, 0.05, amp=0.5)
        for seed in range(200):
            if draw_wet_settings(params, np.random.default_rng(seed)) == WetDraw():
                out = wet_chain(w, params, np.random.default_rng(seed))
                assert np.array_equal(out.samples, w.samples)
                return
        pytest.fail("no seed with all five Bernoulli draws failing in 200 tries")

    def test_pink_only_on_zero_input(self, rng):
        w = Waveform(np.zeros(2000))
        draw = WetDraw(pink_volume=0.03)
        out = apply_wet_settings(w, draw, np.random.default_rng(9))
        expected = pink_noise(2000, 0.03, np.random.default_rng(9))
        assert np.array_equal(out.samples, expected.samples)
        assert np.abs(out.samples).max() == pytest.approx(0.03, rel=1e-12)

    def test_deterministic(self):
        params = WetParams()
        w = sine(330, 0.05, amp=0.7)
        a = wet_chain(w, params, np.random.default_rng(77)).samples
        b = wet_chain(w, params, np.random.default_rng(77)).samples
        assert np.array_equal(a, b)

    def test_length_preserved_and_peak_limited(self):
        params = WetParams(p_apply=1.0)
        w = sine(220, 0.1, amp=0.99)
        for seed in range(5):
            out = wet_chain(w, params, np.random.default_rng(seed))
            assert len(out) == len(w)
            assert np.abs(out.samples).max() <= 1.0 + 1e-12

    def test_apply_rate_concentration(self):
        params = WetParams()
        counts = np.zeros(5)
        n = 4000
        for seed in range(n):
            d = draw_wet_settings(params, np.random.default_rng(seed))
            counts += [
                d.contrast is not None,
                d.eq1 is not None,
                d.eq2 is not None,
                d.reverb is not None,
                d.pink_volume is not None,
            ]
        rates = counts / n
        assert np.all(rates > 0.27) and np.all(rates < 0.33)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            WetParams(p_apply=1.5)
        with pytest.raises(ValueError):
            WetParams(contrast_range=(50.0, 10.0))
