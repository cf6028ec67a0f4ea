"""STFT analysis/synthesis, Griffin-Lim phase reconstruction, chroma features."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .audio_io import EmptyAudioError, Waveform

# Lowest folded pitch: C1.
F_MIN = 440.0 * 2.0 ** (-45.0 / 12.0)

DEFAULT_GRIFFIN_LIM_ITERS = 32


@lru_cache(maxsize=8)
def _hann(n_fft: int) -> np.ndarray:
    # periodic Hann; with hop = n_fft/4 the squared window overlap-adds to a
    # constant in the interior
    k = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n_fft)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 4096
    hop: int = 1024
    center_pad: bool = True
    pad_mode: str = "reflect"

    def __post_init__(self):
        if not (0 < self.hop <= self.n_fft):
            raise ValueError("require 0 < hop <= n_fft")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window(self) -> np.ndarray:
        return _hann(self.n_fft)

    def bin_frequencies(self, sample_rate: int) -> np.ndarray:
        return np.arange(self.n_bins) * (sample_rate / self.n_fft)


@dataclass(eq=False)
class Spectrogram:
    """Complex STFT matrix, frames x bins."""

    data: np.ndarray
    cfg: StftConfig
    sample_rate: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] != self.cfg.n_bins:
            raise ValueError(
                f"expected (frames, {self.cfg.n_bins}) spectrogram, got {self.data.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def magnitude(self) -> "MagSpectrogram":
        return MagSpectrogram(np.abs(self.data), self.cfg, self.sample_rate)

    def phase(self) -> np.ndarray:
        return np.angle(self.data)


@dataclass(eq=False)
class MagSpectrogram:
    """Non-negative magnitude matrix, frames x bins."""

    data: np.ndarray
    cfg: StftConfig
    sample_rate: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.cfg.n_bins:
            raise ValueError(
                f"expected (frames, {self.cfg.n_bins}) magnitudes, got {self.data.shape}"
            )
        if self.data.size and self.data.min() < 0:
            raise ValueError("magnitude spectrogram has negative entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Windowed one-sided FFT frames; centered frames advance by ``cfg.hop``.

    With center padding the frame count is 1 + len(w)//hop, independent of
    content.
    """
    if len(w) == 0:
        raise EmptyAudioError("cannot transform empty waveform")
    x = w.samples
    if cfg.center_pad:
        x = np.pad(x, cfg.n_fft // 2, mode=cfg.pad_mode)
        n_frames = 1 + len(w) // cfg.hop
    else:
        if len(w) < cfg.n_fft:
            raise ValueError("waveform shorter than one frame (center_pad=False)")
        n_frames = 1 + (len(w) - cfg.n_fft) // cfg.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n_frames]
    spec = np.fft.rfft(frames * cfg.window(), axis=1)
    return Spectrogram(spec, cfg, w.sample_rate)


def istft(s: Spectrogram, length: int | None = None) -> Waveform:
    """Overlap-add synthesis normalized by the accumulated squared window.

    This is the least-squares inverse of :func:`stft`: for S = stft(w) the
    reconstruction matches w sample-for-sample.  Without an explicit
    ``length`` the output covers (n_frames - 1) * hop samples.
    """
    cfg = s.cfg
    if s.data.shape[1] != cfg.n_bins:
        raise ValueError("spectrogram width inconsistent with its config")
    win = cfg.window()
    frames = np.fft.irfft(s.data, n=cfg.n_fft, axis=1)
    n_frames = frames.shape[0]
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    y = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(n_frames):
        lo = t * cfg.hop
        y[lo : lo + cfg.n_fft] += frames[t] * win
        wsum[lo : lo + cfg.n_fft] += win * win
    nz = wsum > 1e-12
    y[nz] /= wsum[nz]

    if cfg.center_pad:
        y = y[cfg.n_fft // 2 :]
    if length is None:
        length = (n_frames - 1) * cfg.hop
    if length <= y.size:
        y = y[:length]
    else:
        y = np.concatenate([y, np.zeros(length - y.size)])
    return Waveform(y, s.sample_rate)


def griffin_lim(
    m: MagSpectrogram,
    init_phase: np.ndarray | None = None,
    iters: int = DEFAULT_GRIFFIN_LIM_ITERS,
) -> Waveform:
    """Alternating-projection phase estimation for a magnitude spectrogram.

    Each iteration resynthesizes with the current phase and replaces it by
    the phase of the re-analyzed signal; ``iters=0`` returns the synthesis
    under ``init_phase`` (zero phase if absent).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if init_phase is None:
        init_phase = np.zeros_like(m.data)
    elif init_phase.shape != m.data.shape:
        raise ValueError(
            f"init_phase shape {init_phase.shape} != magnitude shape {m.data.shape}"
        )
    cfg = m.cfg
    spec = m.data * np.exp(1j * init_phase)
    x = istft(Spectrogram(spec, cfg, m.sample_rate))
    for _ in range(iters):
        phase = np.angle(stft(x, cfg).data)
        x = istft(Spectrogram(m.data * np.exp(1j * phase), cfg, m.sample_rate))
    return x


def spectral_distance(mag: np.ndarray, target: np.ndarray) -> float:
    """Distance between two magnitude matrices in the energy-consistent norm
    (middle bins of the one-sided spectrum weighted for their conjugates)."""
    diff2 = (np.asarray(mag, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2
    weights = np.full(diff2.shape[1], 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    return float(np.sqrt((diff2 * weights).sum()))


def _pitch_classes(cfg: StftConfig, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    freqs = cfg.bin_frequencies(sample_rate)
    keep = freqs >= F_MIN
    classes = np.round(12.0 * np.log2(freqs[keep] / F_MIN)).astype(int) % 12
    return keep, classes


def chromagram(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Per-frame STFT energy folded into the 12 pitch classes (frames x 12)."""
    spec = stft(w, cfg)
    energy = np.abs(spec.data) ** 2
    keep, classes = _pitch_classes(cfg, w.sample_rate)
    fold = np.zeros((12, int(keep.sum())))
    fold[classes, np.arange(classes.size)] = 1.0
    return energy[:, keep] @ fold.T


def chroma_mean(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Time-averaged chromagram, L2-normalized (all-zero stays zero)."""
    mean = chromagram(w, cfg).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0:
        mean = mean / norm
    return mean
