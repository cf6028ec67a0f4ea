"""Source-separation quality metrics.

An estimate is decomposed into a target component (least-squares projection
onto delayed copies of the true reference), an interference component
(projection onto all references' delays minus the target), and the
artifact remainder.  SDR/SIR/SAR are energy ratios of these parts in dB,
reported per (song, instrument) and aggregated by median.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len
from scipy.linalg import cho_factor, cho_solve, toeplitz
from scipy.signal import fftconvolve

from .audio_io import Waveform

DEFAULT_FILTER_LEN = 512
DB_CAP = 200.0
TIKHONOV = 1e-12


class CollinearReferencesError(ValueError):
    """Reference signals are (numerically) proportional; projection is singular."""


@dataclass(frozen=True)
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray

    @property
    def estimate(self) -> np.ndarray:
        return self.s_target + self.e_interf + self.e_artif


@dataclass(frozen=True)
class EvalScores:
    song_id: str
    instrument: str
    sdr: float
    sir: float
    sar: float


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        x = x.samples
    return np.asarray(x, dtype=np.float64)


def _check_collinear(refs: np.ndarray) -> None:
    norms = np.linalg.norm(refs, axis=1)
    if np.any(norms == 0):
        raise CollinearReferencesError("a reference signal has zero energy")
    unit = refs / norms[:, None]
    gram = unit @ unit.T
    off = gram - np.eye(len(refs))
    if len(refs) > 1 and np.max(np.abs(off)) > 1.0 - 1e-10:
        raise CollinearReferencesError("reference signals are collinear")


def _lag_correlations(a_spec, b_spec, fft_len: int, max_lag: int) -> np.ndarray:
    """c[d] = sum_t a[t] * b[t + d] for d in -(max_lag-1) .. max_lag-1."""
    full = np.fft.irfft(np.conj(a_spec) * b_spec, n=fft_len)
    pos = full[:max_lag]
    neg = full[fft_len - max_lag + 1 :][::-1] if max_lag > 1 else np.zeros(0)
    return pos, neg


def decompose(
    est,
    refs,
    true_index: int = 0,
    filter_len: int = DEFAULT_FILTER_LEN,
) -> Decomposition:
    """Split ``est`` into target / interference / artifact parts.

    ``refs[true_index]`` is the ground-truth source for this estimate; the
    allowed distortion is a causal FIR filter of ``filter_len`` taps
    (``filter_len=1`` reduces to plain orthogonal projection).  All parts
    are returned zero-padded to length n + filter_len - 1 so that their sum
    reconstructs the (padded) estimate exactly.
    """
    est = _as_array(est)
    refs = np.stack([_as_array(r) for r in refs])
    if refs.ndim != 2 or est.ndim != 1 or refs.shape[1] != est.size:
        raise ValueError("estimate and references must share one length")
    if not 0 <= true_index < len(refs):
        raise ValueError("true_index out of range")
    if filter_len < 1:
        raise ValueError("filter_len must be >= 1")
    _check_collinear(refs)

    m = len(refs)
    n = est.size
    L = filter_len
    total = n + L - 1
    fft_len = next_fast_len(n + L)
    ref_specs = np.fft.rfft(refs, n=fft_len, axis=1)
    est_spec = np.fft.rfft(est, n=fft_len)

    # Toeplitz-block Gram of all delayed references, and their correlation
    # with the estimate.
    gram = np.empty((m * L, m * L))
    rhs = np.empty(m * L)
    for i in range(m):
        for j in range(m):
            pos, neg = _lag_correlations(ref_specs[i], ref_specs[j], fft_len, L)
            # entry (a, b) = c_ij[a - b]
            first_row = np.concatenate([[pos[0]], neg]) if L > 1 else pos[:1]
            gram[i * L : (i + 1) * L, j * L : (j + 1) * L] = toeplitz(pos, first_row)
        pos, _ = _lag_correlations(ref_specs[i], est_spec, fft_len, L)
        rhs[i * L : (i + 1) * L] = pos

    lam = TIKHONOV * max(1.0, float(np.trace(gram)) / gram.shape[0])
    damped = gram + lam * np.eye(gram.shape[0])

    def solve(g, b):
        try:
            return cho_solve(cho_factor(g), b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(g, b, rcond=None)[0]

    coef_all = solve(damped, rhs)
    t0, t1 = true_index * L, (true_index + 1) * L
    coef_true = solve(damped[t0:t1, t0:t1], rhs[t0:t1])

    proj_all = np.zeros(total)
    for i in range(m):
        proj_all += fftconvolve(refs[i], coef_all[i * L : (i + 1) * L])[:total]
    s_target = fftconvolve(refs[true_index], coef_true)[:total]

    est_pad = np.concatenate([est, np.zeros(L - 1)])
    e_interf = proj_all - s_target
    e_artif = est_pad - proj_all
    return Decomposition(s_target=s_target, e_interf=e_interf, e_artif=e_artif)


def _ratio_db(num: float, den: float, floor: float) -> float:
    if num <= floor:
        return -DB_CAP
    if den <= floor:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def scores(dec: Decomposition, song_id: str = "", instrument: str = "") -> EvalScores:
    """SDR/SIR/SAR in dB with +-200 dB caps replacing infinities."""
    s2 = float(np.sum(dec.s_target**2))
    ei2 = float(np.sum(dec.e_interf**2))
    ea2 = float(np.sum(dec.e_artif**2))
    noise2 = float(np.sum((dec.e_interf + dec.e_artif) ** 2))
    si2 = float(np.sum((dec.s_target + dec.e_interf) ** 2))
    floor = 1e-12 * float(np.sum(dec.estimate**2))
    return EvalScores(
        song_id=song_id,
        instrument=instrument,
        sdr=_ratio_db(s2, noise2, floor),
        sir=_ratio_db(s2, ei2, floor),
        sar=_ratio_db(si2, ea2, floor),
    )


def median_report(score_rows: list[EvalScores]) -> list[dict]:
    """Per-instrument medians over songs (even counts average the central pair)."""
    if not score_rows:
        raise ValueError("no scores to aggregate")
    by_instrument: dict[str, list[EvalScores]] = {}
    for s in score_rows:
        by_instrument.setdefault(s.instrument, []).append(s)
    rows = []
    for instrument in sorted(by_instrument):
        group = by_instrument[instrument]
        rows.append(
            {
                "instrument": instrument,
                "sdr": float(np.median([s.sdr for s in group])),
                "sir": float(np.median([s.sir for s in group])),
                "sar": float(np.median([s.sar for s in group])),
                "n_songs": len(group),
            }
        )
    return rows


def write_scores_csv(path, score_rows: list[EvalScores], method: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        header = ["song_id", "instrument", "sdr", "sir", "sar"]
        if method is not None:
            header = ["method"] + header
        out.writerow(header)
        for s in score_rows:
            row = [s.song_id, s.instrument, f"{s.sdr:.6f}", f"{s.sir:.6f}", f"{s.sar:.6f}"]
            if method is not None:
                row = [method] + row
            out.writerow(row)


def write_pgm(path, magnitude: np.ndarray, floor_db: float = -80.0) -> None:
    """Dump a magnitude spectrogram as a log-compressed grayscale PGM image
    (one row per frequency bin, low frequencies at the top)."""
    mag = np.asarray(magnitude, dtype=np.float64)
    if mag.ndim != 2:
        raise ValueError("magnitude must be 2-D")
    db = 20.0 * np.log10(mag.T + 1e-10)
    top = db.max()
    db = np.clip(db, top + floor_db, top)
    pixels = np.round((db - db.min()) / max(1e-12, db.max() - db.min()) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
