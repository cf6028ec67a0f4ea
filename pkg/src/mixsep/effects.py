"""Production-style stem augmentation: contrast, peaking EQ, reverb, pink noise.

Each effect in the chain is applied independently with a configurable
probability (default 30%), with its strength drawn uniformly from the
configured range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio_io import Waveform

Rng = np.random.Generator

# Schroeder reverberator geometry at 44.1 kHz: four parallel feedback combs
# into two series allpasses.
_COMB_DELAYS = (1557, 1617, 1491, 1422)
_ALLPASS = ((225, 0.5), (556, 0.5))


@dataclass(frozen=True)
class WetParams:
    """Per-effect apply probability and parameter ranges for the wet chain."""

    p_apply: float = 0.3
    contrast_range: tuple[float, float] = (1.0, 70.0)
    eq_freq_range: tuple[float, float] = (32.0, 4096.0)
    eq_gain_db_range: tuple[float, float] = (-10.0, 10.0)
    eq_q: float = 0.707
    reverb_range: tuple[float, float] = (1.0, 70.0)
    pink_volume_range: tuple[float, float] = (0.01, 0.04)

    def __post_init__(self):
        if not 0.0 <= self.p_apply <= 1.0:
            raise ValueError("p_apply must be within [0, 1]")
        for name in ("contrast_range", "eq_freq_range", "eq_gain_db_range",
                     "reverb_range", "pink_volume_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.eq_q <= 0:
            raise ValueError("eq_q must be positive")


@dataclass(frozen=True)
class WetDraw:
    """One realization of the chain's random choices (None = effect skipped)."""

    contrast: float | None = None
    eq1: tuple[float, float] | None = None  # (freq_hz, gain_db)
    eq2: tuple[float, float] | None = None
    reverb: float | None = None
    pink_volume: float | None = None


def pink_noise(length: int, volume: float, rng: Rng) -> Waveform:
    """1/f-power noise, peak-normalized then scaled to ``volume``."""
    if length <= 0:
        raise ValueError("length must be positive")
    if volume < 0:
        raise ValueError("volume must be >= 0")
    n_bins = length // 2 + 1
    spec = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    amp = np.zeros(n_bins)
    amp[1:] = 1.0 / np.sqrt(np.arange(1, n_bins))
    spec = spec * amp
    spec[0] = 0.0
    if length % 2 == 0:
        spec[-1] = spec[-1].real
    x = np.fft.irfft(spec, n=length)
    peak = np.abs(x).max()
    if peak > 0:
        x = x * (volume / peak)
    return Waveform(x)


def apply_contrast(w: Waveform, amount: float) -> Waveform:
    """Memoryless sine waveshaper that boosts mid-level samples.

    The drive angle grows with ``amount``; the output is normalized so the
    curve passes through (1, 1), making small amounts near-identity.
    """
    if not 1.0 <= amount <= 70.0:
        raise ValueError(f"contrast amount {amount} outside [1, 70]")
    theta = (math.pi / 2.0) * (amount / 75.0)
    arg = np.clip(w.samples * theta, -math.pi / 2.0, math.pi / 2.0)
    return Waveform(np.sin(arg) / math.sin(theta), w.sample_rate)


def _peaking_coeffs(freq: float, gain_db: float, q: float, sample_rate: int):
    # standard audio-EQ cookbook peaking filter
    a_gain = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * freq / sample_rate
    alpha = math.sin(w0) / (2.0 * q)
    cos_w0 = math.cos(w0)
    b = np.array([1.0 + alpha * a_gain, -2.0 * cos_w0, 1.0 - alpha * a_gain])
    a = np.array([1.0 + alpha / a_gain, -2.0 * cos_w0, 1.0 - alpha / a_gain])
    return b / a[0], a / a[0]


def apply_peaking_eq(w: Waveform, freq: float, gain_db: float, q: float = 0.707) -> Waveform:
    """Single biquad peaking EQ applied causally."""
    if not 0 < freq < w.sample_rate / 2:
        raise ValueError(f"EQ center frequency {freq} outside (0, {w.sample_rate / 2})")
    b, a = _peaking_coeffs(freq, gain_db, q, w.sample_rate)
    return Waveform(lfilter(b, a, w.samples), w.sample_rate)


def _feedback_comb(x: np.ndarray, delay: int, gain: float) -> np.ndarray:
    # y[n] = x[n] + g*y[n-delay]; the recurrence reaches back exactly
    # `delay`, so whole blocks can be processed vectorized
    y = x.copy()
    for lo in range(delay, x.size, delay):
        hi = min(lo + delay, x.size)
        y[lo:hi] += gain * y[lo - delay : lo - delay + (hi - lo)]
    return y


def _allpass(x: np.ndarray, delay: int, gain: float) -> np.ndarray:
    # y[n] = -g*x[n] + x[n-delay] + g*y[n-delay]
    y = -gain * x
    if delay < x.size:
        y[delay:] += x[:-delay]
    for lo in range(delay, x.size, delay):
        hi = min(lo + delay, x.size)
        y[lo:hi] += gain * y[lo - delay : lo - delay + (hi - lo)]
    return y


def apply_reverb(w: Waveform, reverberance: float) -> Waveform:
    """Schroeder reverberator mixed behind the dry signal.

    Comb feedback and wet level both scale with ``reverberance``; output
    length equals input length (tail truncated).
    """
    if not 1.0 <= reverberance <= 70.0:
        raise ValueError(f"reverberance {reverberance} outside [1, 70]")
    g = 0.5 + 0.4 * reverberance / 100.0
    wet = np.zeros(len(w))
    for delay in _COMB_DELAYS:
        wet += _feedback_comb(w.samples, delay, g)
    wet /= len(_COMB_DELAYS)
    for delay, ap_gain in _ALLPASS:
        wet = _allpass(wet, delay, ap_gain)
    out = w.samples + (reverberance / 100.0) * wet
    return Waveform(out, w.sample_rate)


def draw_wet_settings(params: WetParams, rng: Rng) -> WetDraw:
    """Sample which effects fire and their strengths, in chain order."""

    def u(lo_hi: tuple[float, float]) -> float:
        return float(rng.uniform(lo_hi[0], lo_hi[1]))

    contrast = u(params.contrast_range) if rng.random() < params.p_apply else None
    eq1 = (
        (u(params.eq_freq_range), u(params.eq_gain_db_range))
        if rng.random() < params.p_apply
        else None
    )
    eq2 = (
        (u(params.eq_freq_range), u(params.eq_gain_db_range))
        if rng.random() < params.p_apply
        else None
    )
    reverb = u(params.reverb_range) if rng.random() < params.p_apply else None
    pink = u(params.pink_volume_range) if rng.random() < params.p_apply else None
    return WetDraw(contrast=contrast, eq1=eq1, eq2=eq2, reverb=reverb, pink_volume=pink)


def apply_wet_settings(w: Waveform, draw: WetDraw, rng: Rng, eq_q: float = 0.707) -> Waveform:
    """Run the chain for one realized draw; ``rng`` supplies the noise."""
    out = w
    if draw.contrast is not None:
        out = apply_contrast(out, draw.contrast)
    for eq in (draw.eq1, draw.eq2):
        if eq is not None:
            out = apply_peaking_eq(out, eq[0], eq[1], eq_q)
    if draw.reverb is not None:
        out = apply_reverb(out, draw.reverb)
    if draw.pink_volume is not None:
        noise = pink_noise(len(out), draw.pink_volume, rng)
        out = Waveform(out.samples + noise.samples, out.sample_rate)
    peak = np.abs(out.samples).max() if len(out) else 0.0
    if peak > 1.0:
        out = Waveform(out.samples / peak, out.sample_rate)
    return out


def wet_chain(w: Waveform, params: WetParams, rng: Rng) -> Waveform:
    """Randomized effect chain: contrast, EQ x2, reverb, pink noise."""
    return apply_wet_settings(w, draw_wet_settings(params, rng), rng, params.eq_q)
