import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsep import dsp
from mixsep.audio_io import EmptyAudioError, Waveform
from mixsep.dsp import MagSpectrogram, Spectrogram, StftConfig

from conftest import aligned_snr, sine

SR = 44100


class TestStftConfig:
    def test_defaults(self):
        cfg = StftConfig()
        assert cfg.n_fft == 4096 and cfg.hop == 1024
        assert cfg.n_bins == 2049

    def test_invariants(self):
        with pytest.raises(ValueError):
            StftConfig(n_fft=4000)
        with pytest.raises(ValueError):
            StftConfig(hop=8192)


class TestStft:
    def test_zero_waveform_zero_spectrogram(self):
        s = dsp.stft(Waveform(np.zeros(SR)))
        assert np.all(s.data == 0)

    def test_1000hz_argmax_bin_93(self):
        s = dsp.stft(sine(1000, 1.0))
        mags = np.abs(s.data)
        # skip first/last frames where reflection padding dominates
        assert np.all(np.argmax(mags[2:-2], axis=1) == 93)

    def test_chunk_frame_count(self):
        s = dsp.stft(Waveform(np.zeros(441000)))
        assert s.n_frames == 431
        assert s.data.shape == (431, 2049)

    def test_empty_error(self):
        with pytest.raises(EmptyAudioError):
            dsp.stft(Waveform(np.zeros(0)))

    def test_linearity(self, rng):
        w1 = Waveform(rng.standard_normal(5 * 1024))
        w2 = Waveform(rng.standard_normal(5 * 1024))
        a, b = 0.7, -1.3
        combined = dsp.stft(Waveform(a * w1.samples + b * w2.samples)).data
        separate = a * dsp.stft(w1).data + b * dsp.stft(w2).data
        scale = np.abs(separate).max()
        assert np.max(np.abs(combined - separate)) / scale < 1e-9


class TestIstft:
    def test_round_trip_noise(self, rng):
        w = Waveform(rng.standard_normal(3 * SR) * 0.4)
        back = dsp.istft(dsp.stft(w), length=len(w))
        assert np.max(np.abs(back.samples - w.samples)) / np.max(np.abs(w.samples)) < 1e-6

    def test_zero_spectrogram_zero_waveform(self):
        cfg = StftConfig()
        s = Spectrogram(np.zeros((10, cfg.n_bins), dtype=complex), cfg, SR)
        assert np.all(dsp.istft(s).samples == 0)

    def test_single_frame_dc_closed_form(self):
        cfg = StftConfig()
        spec = np.zeros((1, cfg.n_bins), dtype=complex)
        spec[0, 0] = 7.0
        # irfft of a pure-DC frame is the constant 7/n_fft; squared-window
        # overlap-add of a single frame gives (c*win)/win**2 = c/win
        out = dsp.istft(Spectrogram(spec, cfg, SR), length=cfg.hop)
        win = cfg.window()[cfg.n_fft // 2 : cfg.n_fft // 2 + cfg.hop]
        assert np.allclose(out.samples, (7.0 / cfg.n_fft) / win, rtol=1e-10)

    def test_parseval_for_hop_multiple_lengths(self, rng):
        w = Waveform(rng.standard_normal(40 * 1024))
        back = dsp.istft(dsp.stft(w))
        assert len(back) == len(w)
        e1 = float(w.samples @ w.samples)
        e2 = float(back.samples @ back.samples)
        assert abs(e1 - e2) / e1 < 1e-9

    def test_width_mismatch_error(self):
        cfg = StftConfig()
        with pytest.raises(ValueError):
            Spectrogram(np.zeros((4, 100), dtype=complex), cfg, SR)

    def test_pad_to_requested_length(self, rng):
        w = Waveform(rng.standard_normal(3000))
        out = dsp.istft(dsp.stft(w), length=6000)
        assert len(out) == 6000
        # original region reconstructed, region past the synthesis zero-padded
        assert np.max(np.abs(out.samples[:3000] - w.samples)) < 1e-9
        assert np.all(out.samples[4096:] == 0)


class TestGriffinLim:
    def test_exact_phase_round_trip(self, rng):
        w = Waveform(rng.standard_normal(2 * SR) * 0.3)
        s = dsp.stft(w)
        out = dsp.griffin_lim(s.magnitude(), init_phase=s.phase(), iters=0)
        n = len(out)
        assert np.max(np.abs(out.samples - w.samples[:n])) < 1e-6

    def test_zero_magnitude_zero_waveform(self):
        cfg = StftConfig()
        m = MagSpectrogram(np.zeros((12, cfg.n_bins)), cfg, SR)
        for iters in (0, 3):
            assert np.all(dsp.griffin_lim(m, iters=iters).samples == 0)

    def test_sine_reconstruction_snr_zero_init(self):
        # plain projection iterations from zero phase converge slowly on
        # sustained tones; 15.8 dB measured for this configuration, frozen
        # with margin (see also the mixture-phase acceptance check)
        w = sine(440, 5000 / SR)
        m = dsp.stft(w).magnitude()
        out = dsp.griffin_lim(m, iters=32)
        n = min(len(out), len(w))
        snr = aligned_snr(w.samples[:n], out.samples[:n])
        assert snr > 12.0

    def test_sine_reconstruction_snr_mixture_phase_init(self):
        w = sine(440, 10.0, amp=0.5)
        mixture = Waveform(w.samples + sine(350, 10.0, amp=0.5).samples)
        m = dsp.stft(w).magnitude()
        out = dsp.griffin_lim(m, init_phase=dsp.stft(mixture).phase(), iters=32)
        n = min(len(out), len(w))
        assert aligned_snr(w.samples[:n], out.samples[:n]) > 20.0

    def test_monotone_spectral_convergence(self, rng):
        w = Waveform(rng.standard_normal(SR) * 0.2 + sine(523.25, 1.0).samples)
        m = dsp.stft(w).magnitude()
        cfg = m.cfg
        x = dsp.istft(Spectrogram(m.data.astype(complex), cfg, SR))
        prev = None
        for _ in range(20):
            spec = dsp.stft(x, cfg)
            dist = float(np.linalg.norm(np.abs(spec.data) - m.data))
            if prev is not None:
                assert dist <= prev + 1e-7
            prev = dist
            x = dsp.istft(Spectrogram(m.data * np.exp(1j * np.angle(spec.data)), cfg, SR))

    def test_phase_shape_mismatch(self):
        cfg = StftConfig()
        m = MagSpectrogram(np.zeros((4, cfg.n_bins)), cfg, SR)
        with pytest.raises(ValueError):
            dsp.griffin_lim(m, init_phase=np.zeros((5, cfg.n_bins)))


class TestChroma:
    def test_zero_signal_zero_chromagram(self):
        assert np.all(dsp.chromagram(Waveform(np.zeros(SR))) == 0)

    def test_440_maps_to_class_9(self):
        cg = dsp.chromagram(sine(440, 1.0))
        # interior frames; the outermost frames are dominated by padding
        assert np.all(np.argmax(cg[2:-2], axis=1) == 9)

    def test_c4_maps_to_class_0(self):
        cg = dsp.chromagram(sine(261.63, 1.0))
        assert np.all(np.argmax(cg[2:-2], axis=1) == 0)

    def test_nonnegative(self, rng):
        cg = dsp.chromagram(Waveform(rng.standard_normal(SR)))
        assert cg.min() >= 0

    def test_chroma_mean_zero(self):
        assert np.all(dsp.chroma_mean(Waveform(np.zeros(SR))) == 0)

    def test_chroma_mean_unit_norm(self, rng):
        v = dsp.chroma_mean(Waveform(rng.standard_normal(SR)))
        assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_octave_pair_class_9(self):
        w = Waveform(sine(440, 1.0).samples + sine(880, 1.0).samples)
        assert int(np.argmax(dsp.chroma_mean(w))) == 9

    @settings(max_examples=10, deadline=None)
    @given(gain=st.floats(min_value=0.01, max_value=50.0))
    def test_gain_invariance(self, gain):
        w = sine(329.63, 0.3)
        base = dsp.chroma_mean(w)
        scaled = dsp.chroma_mean(Waveform(w.samples * gain))
        assert np.allclose(base, scaled, atol=1e-9)
