"""WAV input/output, silence-based splitting, and fixed-length chunking.

Everything downstream works on mono float waveforms at a single canonical
sample rate (44.1 kHz).  Files at other rates are rejected rather than
resampled.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 44100

# Frame geometry for silence detection (see split_nonsilent).
SILENCE_FRAME = 2048
SILENCE_HOP = 512


class UnreadableFileError(ValueError):
    """File is missing or not a parseable RIFF/WAVE container."""


class UnsupportedFormatError(ValueError):
    """WAV codec or channel layout outside PCM-16/24/float-32 mono/stereo."""


class EmptyAudioError(ValueError):
    """Audio payload contains zero samples."""


class SampleRateError(ValueError):
    """File sample rate differs from the requested canonical rate."""


class Instrument(str, enum.Enum):
    VIOLIN = "violin"
    PIANO = "piano"


@dataclass(eq=False)
class Waveform:
    """Mono audio: float samples (nominal range [-1, 1]) plus sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Interval:
    """Half-open sample range [start, end)."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid interval [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(eq=False)
class StemChunk:
    """A fixed-length single-instrument excerpt with provenance.

    ``chroma`` and ``envelope`` are feature caches filled in lazily by the
    dsp/pairing layers.
    """

    audio: Waveform
    instrument: Instrument
    source_id: str
    offset: int = 0
    chroma: np.ndarray | None = field(default=None, repr=False)
    envelope: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.instrument = Instrument(self.instrument)
        if self.offset < 0:
            raise ValueError("offset must be non-negative")


def chunk_id(c: StemChunk) -> str:
    """Stable identifier derived from chunk provenance."""
    return f"{c.instrument.value}_{c.source_id}_{c.offset}"


def read_wav(path, expect_rate: int | None = None) -> Waveform:
    """Read a PCM-16/24/float-32 WAV file as a mono waveform.

    Stereo input is downmixed by averaging the two channels; integer
    samples are scaled to [-1, 1) by the width of their sample type.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        # scipy raises ValueError for unknown/compressed codecs
        raise UnsupportedFormatError(f"unsupported WAV format in {path}: {exc}") from exc
    except Exception as exc:  # truncated/corrupt containers
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc

    if expect_rate is not None and rate != expect_rate:
        raise SampleRateError(f"{path}: sample rate {rate} != expected {expect_rate}")

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 2**15
    elif data.dtype == np.int32:
        # 24-bit PCM arrives shifted into the high bytes of int32, so one
        # divisor covers both PCM-24 and PCM-32.
        x = data.astype(np.float64) / 2**31
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample dtype {data.dtype}")

    if x.ndim == 2:
        if x.shape[1] > 2:
            raise UnsupportedFormatError(f"{path}: {x.shape[1]} channels (max 2)")
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    return Waveform(x, int(rate))


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a waveform as WAV; ``fmt`` is "pcm16" or "float32"."""
    path = Path(path)
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        clipped = np.clip(w.samples, -1.0, 32767 / 32768)
        data = np.round(clipped * 32768).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, data)


def _frame_powers(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Mean-square power of left-aligned frames (last frames truncated)."""
    starts = np.arange(0, x.size, hop)
    ends = np.minimum(starts + frame, x.size)
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    return (csum[ends] - csum[starts]) / (ends - starts)


def split_nonsilent(
    w: Waveform,
    top_db: float = 20.0,
    frame_length: int = SILENCE_FRAME,
    hop_length: int = SILENCE_HOP,
) -> list[Interval]:
    """Locate sounding regions: frames whose RMS power is within ``top_db``
    of the loudest frame.

    Frames of ``frame_length`` samples advance by ``hop_length``.  Because a
    long frame fires as soon as energy enters its tail, run boundaries are
    snapped inward to the hop slice where the energy actually appeared,
    keeping interval edges accurate to about one hop.
    """
    if len(w) == 0:
        raise EmptyAudioError("cannot split empty waveform")
    if top_db <= 0:
        raise ValueError("top_db must be positive")

    n = len(w)
    power = _frame_powers(w.samples, frame_length, hop_length)
    ref = power.max()
    if ref <= 0.0:
        return []
    loud = power > ref * 10.0 ** (-top_db / 10.0)

    last_frame = power.size - 1
    raw: list[tuple[int, int]] = []
    f = 0
    while f < power.size:
        if not loud[f]:
            f += 1
            continue
        f0 = f
        while f + 1 < power.size and loud[f + 1]:
            f += 1
        f1 = f
        start = 0 if f0 == 0 else f0 * hop_length + frame_length - hop_length
        start = min(start, f1 * hop_length)
        end = n if f1 == last_frame else (f1 + 1) * hop_length
        raw.append((max(0, start), min(n, end)))
        f += 1

    merged: list[tuple[int, int]] = []
    for start, end in raw:
        if end <= start:
            continue
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(end, merged[-1][1]))
        else:
            merged.append((start, end))
    return [Interval(s, e) for s, e in merged]


def remove_silence(w: Waveform, top_db: float = 20.0) -> Waveform:
    """Concatenate the sounding regions of ``w`` in order."""
    intervals = split_nonsilent(w, top_db)
    if not intervals:
        return Waveform(np.zeros(0), w.sample_rate)
    parts = [w.samples[iv.start : iv.end] for iv in intervals]
    return Waveform(np.concatenate(parts), w.sample_rate)


def chunk(
    w: Waveform,
    seconds: float,
    instrument: Instrument | str,
    source_id: str,
) -> list[StemChunk]:
    """Cut ``w`` into consecutive non-overlapping chunks of exactly
    ``seconds``; a trailing remainder shorter than one chunk is dropped."""
    if seconds <= 0:
        raise ValueError("chunk duration must be positive")
    chunk_len = int(round(seconds * w.sample_rate))
    out = []
    for k in range(len(w) // chunk_len):
        off = k * chunk_len
        out.append(
            StemChunk(
                audio=Waveform(w.samples[off : off + chunk_len].copy(), w.sample_rate),
                instrument=instrument,
                source_id=source_id,
                offset=off,
            )
        )
    return out
