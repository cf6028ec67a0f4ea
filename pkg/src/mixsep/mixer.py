"""Assembly of supervised (mixture, targets) examples from chunk pools."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .audio_io import StemChunk, Waveform, chunk_id, write_wav
from .pairing import EmptyPoolError, PairIndex, PairMode, sample_pairs

Rng = np.random.Generator


class AugMode(str, enum.Enum):
    RANDOM = "random"
    WET = "wet"
    CHROMA = "chroma"
    CORRELATION = "correlation"
    NONSILENCE = "nonsilence"

    @property
    def pair_mode(self) -> PairMode:
        if self is AugMode.CHROMA:
            return PairMode.CHROMA
        if self is AugMode.CORRELATION:
            return PairMode.CORRELATION
        return PairMode.RANDOM


class Regime(str, enum.Enum):
    DATA_LIMITED = "data_limited"
    DATA_RICH = "data_rich"

    @property
    def pairs_per_epoch(self) -> int:
        return 250 if self is Regime.DATA_LIMITED else 2000


# Training-pool cap in the data-limited regime, per instrument.
DATA_LIMITED_MINUTES = 16.0
VALID_PAIRS_PER_EPOCH = 100


@dataclass(eq=False)
class MixExample:
    """One supervised example: mixture plus its two stem targets.

    The optional chunk ids and joint scale record provenance so consumers
    can reuse per-chunk spectrogram caches.
    """

    mixture: Waveform
    target_violin: Waveform
    target_piano: Waveform
    violin_id: str | None = None
    piano_id: str | None = None
    scale: float = 1.0


def mix_waveforms(v: Waveform, p: Waveform) -> tuple[Waveform, Waveform, Waveform, float]:
    """Sum two stems; if the sum clips, scale all three signals jointly.

    The mixture is recomputed from the scaled targets so that
    mixture == target_violin + target_piano holds bit-exactly.
    """
    if len(v) != len(p):
        raise ValueError(f"stem length mismatch: {len(v)} vs {len(p)}")
    if v.sample_rate != p.sample_rate:
        raise ValueError(f"sample rate mismatch: {v.sample_rate} vs {p.sample_rate}")
    peak = np.abs(v.samples + p.samples).max() if len(v) else 0.0
    scale = 1.0 / peak if peak > 1.0 else 1.0
    tv = v.samples if scale == 1.0 else v.samples * scale
    tp = p.samples if scale == 1.0 else p.samples * scale
    sr = v.sample_rate
    return Waveform(tv + tp, sr), Waveform(tv, sr), Waveform(tp, sr), scale


def mix(v: StemChunk, p: StemChunk) -> MixExample:
    """Combine one violin chunk and one piano chunk into a supervised example."""
    mixture, tv, tp, scale = mix_waveforms(v.audio, p.audio)
    return MixExample(
        mixture=mixture,
        target_violin=tv,
        target_piano=tp,
        violin_id=chunk_id(v),
        piano_id=chunk_id(p),
        scale=scale,
    )


def epoch_examples(
    violins: list[StemChunk],
    pianos: list[StemChunk],
    mode: AugMode | str,
    n: int,
    seed: int,
    epoch: int,
    index: PairIndex | None = None,
) -> Iterator[MixExample]:
    """Yield exactly ``n`` examples for one epoch, deterministically.

    Pools are expected to be prepared for ``mode`` already (wet processing
    and silence removal happen at pool-preparation time); chroma and
    correlation modes draw from the supplied pair index, the other modes
    from the uniform cross product.
    """
    mode = AugMode(mode)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not violins or not pianos:
        raise EmptyPoolError("epoch_examples needs non-empty pools")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))

    if mode.pair_mode is PairMode.RANDOM:
        iv = rng.integers(0, len(violins), size=n)
        ip = rng.integers(0, len(pianos), size=n)
        pairs = [(violins[i], pianos[j]) for i, j in zip(iv, ip)]
    else:
        if index is None:
            raise ValueError(f"mode {mode.value} requires a pair index")
        by_v = {chunk_id(c): c for c in violins}
        by_p = {chunk_id(c): c for c in pianos}
        drawn = sample_pairs(index, n, rng)
        pairs = [(by_v[vid], by_p[pid]) for vid, pid in drawn]

    for v, p in pairs:
        yield mix(v, p)


def materialize_epoch(out_dir, examples, fmt: str = "float32") -> Path:
    """Write an epoch's examples as WAV triples plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, ex in enumerate(examples):
        names = {}
        for part, wav in (
            ("mixture", ex.mixture),
            ("violin", ex.target_violin),
            ("piano", ex.target_piano),
        ):
            fname = f"{k:05d}_{part}.wav"
            write_wav(out_dir / fname, wav, fmt)
            names[part] = fname
        entries.append(
            {
                "index": k,
                "files": names,
                "violin_id": ex.violin_id,
                "piano_id": ex.piano_id,
                "scale": ex.scale,
            }
        )
    manifest = out_dir / "epoch_manifest.json"
    manifest.write_text(json.dumps({"examples": entries}, indent=2, sort_keys=True))
    return manifest
