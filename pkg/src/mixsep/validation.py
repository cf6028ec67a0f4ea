"""Input-validation helpers shared by the estimator and the pipeline."""

from __future__ import annotations

import numpy as np

from .audio_io import Waveform
from .dsp import MagSpectrogram


def ensure_waveform(x, sample_rate: int | None = None) -> Waveform:
    """Coerce a Waveform or 1-D array into a Waveform."""
    if isinstance(x, Waveform):
        return x
    if sample_rate is None:
        raise ValueError("sample_rate required when passing a bare array")
    return Waveform(np.asarray(x, dtype=np.float64), sample_rate)


def check_same_length(*waves: Waveform) -> int:
    lengths = {len(w) for w in waves}
    if len(lengths) != 1:
        raise ValueError(f"waveform lengths differ: {sorted(lengths)}")
    return lengths.pop()


def check_magnitude_matrix(x, n_bins: int) -> np.ndarray:
    """Accept a MagSpectrogram or (frames, n_bins) array; return the array."""
    if isinstance(x, MagSpectrogram):
        x = x.data
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != n_bins:
        raise ValueError(f"expected (frames, {n_bins}) magnitude matrix, got {x.shape}")
    return x
