"""Candidate-pair selection for mixing: chroma-distance and activity-correlation
filters over violin/piano chunk pools, plus pair sampling."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .audio_io import StemChunk, chunk_id

Rng = np.random.Generator

ENVELOPE_BLOCK = 1024
CORR_SCALE = 100.0


class EmptyPoolError(ValueError):
    """A chunk pool handed to index construction has no entries."""


class EmptyIndexError(ValueError):
    """No candidate pair survived the pairing predicate (threshold too strict)."""


class PairMode(str, enum.Enum):
    RANDOM = "random"
    CHROMA = "chroma"
    CORRELATION = "correlation"


@dataclass(frozen=True)
class PairingThresholds:
    chroma_max: float = 0.48
    corr_min: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.chroma_max <= 2.0:
            raise ValueError("chroma_max must be in (0, 2]")
        if self.corr_min < 0:
            raise ValueError("corr_min must be >= 0")


@dataclass(eq=False)
class PairIndex:
    """Candidate (violin, piano) pairs with their pairing scores.

    ``mode=random`` keeps the full cross product implicit: only the pool ids
    are stored and ``pairs`` stays empty.
    """

    mode: PairMode
    violin_ids: list[str]
    piano_ids: list[str]
    pairs: list[tuple[str, str, float]] = field(default_factory=list)
    thresholds: PairingThresholds = field(default_factory=PairingThresholds)

    @property
    def n_candidates(self) -> int:
        if self.mode is PairMode.RANDOM:
            return len(self.violin_ids) * len(self.piano_ids)
        return len(self.pairs)


def chroma_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two 12-dimensional chroma vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (12,) or b.shape != (12,):
        raise ValueError("chroma vectors must have shape (12,)")
    return float(np.linalg.norm(a - b))


def magnitude_envelope(c: StemChunk) -> np.ndarray:
    """Coarse activity envelope: block-mean of |samples|, L2-normalized."""
    x = np.abs(c.audio.samples)
    n_blocks = -(-x.size // ENVELOPE_BLOCK)
    env = np.empty(n_blocks)
    for k in range(n_blocks):
        env[k] = x[k * ENVELOPE_BLOCK : (k + 1) * ENVELOPE_BLOCK].mean()
    norm = np.linalg.norm(env)
    if norm > 0:
        env /= norm
    return env


def corr_score(a: np.ndarray, b: np.ndarray, statistic: str = "max_lag") -> float:
    """Co-activity score: cross-correlation magnitude of two envelopes.

    ``max_lag`` takes the peak |correlation| over all lags, ``zero_lag`` the
    aligned inner product; both are reported on a 0-100 scale for unit-norm
    envelopes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"envelope length mismatch: {a.shape} vs {b.shape}")
    if statistic == "max_lag":
        value = np.abs(np.correlate(a, b, mode="full")).max()
    elif statistic == "zero_lag":
        value = abs(float(np.dot(a, b)))
    else:
        raise ValueError(f"unknown correlation statistic {statistic!r}")
    return float(value * CORR_SCALE)


def _ensure_chroma(c: StemChunk) -> np.ndarray:
    if c.chroma is None:
        c.chroma = dsp.chroma_mean(c.audio)
    return c.chroma


def _ensure_envelope(c: StemChunk) -> np.ndarray:
    if c.envelope is None:
        c.envelope = magnitude_envelope(c)
    return c.envelope


def build_pair_index(
    violins: list[StemChunk],
    pianos: list[StemChunk],
    mode: PairMode | str = PairMode.RANDOM,
    thresholds: PairingThresholds = PairingThresholds(),
    statistic: str = "max_lag",
) -> PairIndex:
    """Evaluate the pairing predicate over the full cross product.

    Chroma mode keeps pairs with chroma distance strictly below
    ``thresholds.chroma_max``; correlation mode keeps pairs whose envelope
    correlation is at least ``thresholds.corr_min``.
    """
    mode = PairMode(mode)
    if not violins or not pianos:
        raise EmptyPoolError("both chunk pools must be non-empty")
    v_ids = [chunk_id(c) for c in violins]
    p_ids = [chunk_id(c) for c in pianos]
    index = PairIndex(mode=mode, violin_ids=v_ids, piano_ids=p_ids, thresholds=thresholds)
    if mode is PairMode.RANDOM:
        return index

    pairs: list[tuple[str, str, float]] = []
    if mode is PairMode.CHROMA:
        for v, vid in zip(violins, v_ids):
            cv = _ensure_chroma(v)
            for p, pid in zip(pianos, p_ids):
                score = chroma_distance(cv, _ensure_chroma(p))
                if score < thresholds.chroma_max:
                    pairs.append((vid, pid, score))
    else:
        for v, vid in zip(violins, v_ids):
            ev = _ensure_envelope(v)
            for p, pid in zip(pianos, p_ids):
                score = corr_score(ev, _ensure_envelope(p), statistic)
                if score >= thresholds.corr_min:
                    pairs.append((vid, pid, score))
    if not pairs:
        raise EmptyIndexError(
            f"no pair passes the {mode.value} threshold; relax the threshold"
        )
    index.pairs = pairs
    return index


def sample_pairs(index: PairIndex, n: int, rng: Rng) -> list[tuple[str, str]]:
    """Draw ``n`` candidate pairs uniformly with replacement."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if index.n_candidates == 0:
        raise EmptyIndexError("cannot sample from an empty pair index")
    if index.mode is PairMode.RANDOM:
        iv = rng.integers(0, len(index.violin_ids), size=n)
        ip = rng.integers(0, len(index.piano_ids), size=n)
        return [(index.violin_ids[i], index.piano_ids[j]) for i, j in zip(iv, ip)]
    rows = rng.integers(0, len(index.pairs), size=n)
    return [(index.pairs[r][0], index.pairs[r][1]) for r in rows]


def save_pair_index(index: PairIndex, path) -> None:
    """Persist as line-oriented CSV: a mode header, then violin_id,piano_id,score
    rows.  Random mode stores the two id pools with the counterpart column
    left empty (the cross product itself stays implicit)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mode", index.mode.value])
        if index.mode is PairMode.RANDOM:
            for vid in index.violin_ids:
                out.writerow([vid, "", ""])
            for pid in index.piano_ids:
                out.writerow(["", pid, ""])
        else:
            for vid, pid, score in index.pairs:
                out.writerow([vid, pid, repr(score)])


def load_pair_index(path, thresholds: PairingThresholds = PairingThresholds()) -> PairIndex:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "mode":
        raise ValueError(f"{path}: not a pair-index file")
    mode = PairMode(rows[0][1])
    if mode is PairMode.RANDOM:
        v_ids = [r[0] for r in rows[1:] if r[0]]
        p_ids = [r[1] for r in rows[1:] if r[1]]
        return PairIndex(mode=mode, violin_ids=v_ids, piano_ids=p_ids, thresholds=thresholds)
    pairs = [(r[0], r[1], float(r[2])) for r in rows[1:]]
    v_ids = sorted({p[0] for p in pairs})
    p_ids = sorted({p[1] for p in pairs})
    return PairIndex(mode=mode, violin_ids=v_ids, piano_ids=p_ids, pairs=pairs,
                     thresholds=thresholds)
