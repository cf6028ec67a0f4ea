import numpy as np
import pytest

from mixsep.audio_io import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq: float, seconds: float, sr: int = 44100, amp: float = 1.0) -> Waveform:
    t = np.arange(int(round(seconds * sr)))
    return Waveform(amp * np.sin(2.0 * np.pi * freq * t / sr), sr)


def aligned_snr(ref: np.ndarray, est: np.ndarray) -> float:
    """SNR in dB after optimal global gain and integer-lag alignment."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    corr = np.correlate(ref, est, mode="full")
    lag = int(np.argmax(np.abs(corr))) - (est.size - 1)
    if lag >= 0:
        r, e = ref[lag:], est[: est.size - lag]
    else:
        r, e = ref[: ref.size + lag], est[-lag:]
    n = min(r.size, e.size)
    r, e = r[:n], e[:n]
    denom = float(e @ e)
    gain = float(r @ e) / denom if denom > 0 else 0.0
    resid = r - gain * e
    num = float(r @ r)
    den = float(resid @ resid)
    if den <= 0:
        return np.inf
    return 10.0 * np.log10(num / den)
