"""Experiment orchestration: corpus preparation, pair indexing, training,
separation, and evaluation, driven by a JSON experiment manifest."""

from __future__ import annotations

import csv
import enum
import json
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .audio_io import Instrument, StemChunk, Waveform, chunk, chunk_id, read_wav, remove_silence, write_wav
from .bsseval import EvalScores, decompose, median_report, scores, write_pgm, write_scores_csv
from .dsp import StftConfig
from .effects import WetParams, wet_chain
from .mixer import (
    DATA_LIMITED_MINUTES,
    VALID_PAIRS_PER_EPOCH,
    AugMode,
    Regime,
    epoch_examples,
    mix_waveforms,
)
from .pairing import (
    PairIndex,
    PairingThresholds,
    PairMode,
    build_pair_index,
    load_pair_index,
    magnitude_envelope,
    save_pair_index,
)
from .separation import (
    MaskEstimator,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    oracle_irm,
    resynthesize,
    save_checkpoint,
    separate,
)
from .validation import check_same_length

WORKERS_ENV = "MIXSEP_WORKERS"

# sub-seed tags so every pipeline stage draws from its own stream
_SEED_TRAIN = 1
_SEED_VALID = 2
_SEED_MODEL = 3
_SEED_WET = 4

INSTRUMENTS = (Instrument.VIOLIN, Instrument.PIANO)


def subseed(seed: int, *tags: int) -> int:
    """Derive an independent integer seed from (seed, tags...)."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass
class ExperimentManifest:
    """One experiment = one augmentation mode + one data regime + one seed."""

    corpus: dict[str, str]
    out_dir: str
    mode: AugMode = AugMode.RANDOM
    regime: Regime = Regime.DATA_LIMITED
    seed: int = 0
    sample_rate: int = 44100
    chunk_seconds: float = 10.0
    top_db: float = 20.0
    valid_fraction: float = 1.0 / 6.0
    limited_minutes: float = DATA_LIMITED_MINUTES
    pairs_per_epoch: int | None = None
    valid_pairs_per_epoch: int = VALID_PAIRS_PER_EPOCH
    corr_statistic: str = "max_lag"
    gl_iters: int = 32
    bss_filter_len: int = 512
    thresholds: PairingThresholds = field(default_factory=PairingThresholds)
    wet: WetParams = field(default_factory=WetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pools_dir: str | None = None
    cache_dir: str | None = None

    @property
    def n_pairs(self) -> int:
        return self.pairs_per_epoch if self.pairs_per_epoch else self.regime.pairs_per_epoch

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def pools_path(self) -> Path:
        return Path(self.pools_dir) if self.pools_dir else self.out_path / "pools"

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.out_path / "cache"

    def stft_cfg(self) -> StftConfig:
        return StftConfig()


_NESTED = {
    "thresholds": PairingThresholds,
    "wet": WetParams,
    "model": ModelConfig,
    "train": TrainConfig,
}
_PATH_KEYS = ("out_dir", "pools_dir", "cache_dir")


def _build_nested(cls, data: dict):
    coerced = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        coerced[f.name] = value
    return cls(**coerced)


def manifest_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentManifest:
    data = dict(data)
    kwargs = {}
    for f in fields(ExperimentManifest):
        if f.name not in data:
            continue
        value = data.pop(f.name)
        if f.name in _NESTED and isinstance(value, dict):
            value = _build_nested(_NESTED[f.name], value)
        elif f.name == "mode":
            value = AugMode(value)
        elif f.name == "regime":
            value = Regime(value)
        kwargs[f.name] = value
    if data:
        raise ValueError(f"unknown manifest keys: {sorted(data)}")
    manifest = ExperimentManifest(**kwargs)
    if base_dir is not None:
        corpus = {k: str((base_dir / v).resolve()) for k, v in manifest.corpus.items()}
        manifest.corpus = corpus
        for key in _PATH_KEYS:
            value = getattr(manifest, key)
            if value is not None:
                setattr(manifest, key, str((base_dir / value).resolve()))
    return manifest


def _deep_set(data: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def load_manifest(path, overrides: list[str] = ()) -> ExperimentManifest:
    """Read a manifest JSON; ``overrides`` are dotted key=value pairs."""
    path = Path(path)
    data = json.loads(path.read_text())
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        _deep_set(data, key.strip(), raw)
    return manifest_from_dict(data, base_dir=path.parent)


def manifest_to_dict(manifest: ExperimentManifest) -> dict:
    def clean(obj):
        if isinstance(obj, enum.Enum):
            return obj.value
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return clean(asdict(manifest))


@dataclass
class TestEntry:
    __test__ = False  # not a pytest class, despite the name

    mixture_id: str
    violin: str
    piano: str


@dataclass
class TestSetManifest:
    __test__ = False  # not a pytest class, despite the name

    entries: list[TestEntry]

    @classmethod
    def load(cls, path) -> "TestSetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        entries = [
            TestEntry(
                mixture_id=e["mixture_id"],
                violin=str((path.parent / e["violin"]).resolve()),
                piano=str((path.parent / e["piano"]).resolve()),
            )
            for e in data["entries"]
        ]
        if not entries:
            raise ValueError(f"{path}: empty test set")
        return cls(entries=entries)


def _write_run_record(manifest: ExperimentManifest, command: str, extra: dict | None = None) -> None:
    record = {
        "command": command,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "manifest": manifest_to_dict(manifest),
    }
    if extra:
        record.update(extra)
    out = manifest.out_path
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    history = []
    if path.exists():
        history = json.loads(path.read_text()).get("commands", [])
    history.append(record)
    path.write_text(json.dumps({"commands": history}, indent=2))


# --------------------------------------------------------------------------
# prepare
# --------------------------------------------------------------------------


def _prepare_instrument(manifest: ExperimentManifest, instrument: Instrument, idx: int):
    directory = Path(manifest.corpus[instrument.value])
    files = sorted(directory.glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no WAV files under {directory}")
    chunks: list[StemChunk] = []
    for f in files:
        w = read_wav(f, expect_rate=manifest.sample_rate)
        if manifest.mode is AugMode.NONSILENCE:
            w = remove_silence(w, manifest.top_db)
            if len(w) == 0:
                continue
        chunks.extend(chunk(w, manifest.chunk_seconds, instrument, source_id=f.stem))
    if not chunks:
        raise ValueError(f"{directory}: corpus yields no full {manifest.chunk_seconds}s chunks")

    n_valid = int(round(len(chunks) * manifest.valid_fraction)) if len(chunks) > 1 else 0
    n_valid = min(n_valid, len(chunks) - 1)
    train = chunks[: len(chunks) - n_valid] if n_valid else chunks
    valid = chunks[len(chunks) - n_valid :] if n_valid else []

    if manifest.regime is Regime.DATA_LIMITED:
        cap = int(manifest.limited_minutes * 60.0 / manifest.chunk_seconds)
        train = train[:cap]

    if manifest.mode is AugMode.WET:
        for split in (train, valid):
            for k, c in enumerate(split):
                rng = np.random.default_rng(
                    np.random.SeedSequence(
                        [manifest.seed, _SEED_WET, idx, c.offset,
                         zlib.crc32(c.source_id.encode())]
                    )
                )
                c.audio = wet_chain(c.audio, manifest.wet, rng)

    for split in (train, valid):
        for c in split:
            c.chroma = dsp.chroma_mean(c.audio)
            c.envelope = magnitude_envelope(c)
    return {"train": train, "valid": valid}


def cmd_prepare(manifest: ExperimentManifest) -> Path:
    """Build mode-specific chunk pools with cached pairing features."""
    pools_dir = manifest.pools_path
    pools_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "sample_rate": manifest.sample_rate,
        "chunk_seconds": manifest.chunk_seconds,
        "mode": manifest.mode.value,
        "regime": manifest.regime.value,
        "seed": manifest.seed,
        "pools": {},
    }
    for idx, instrument in enumerate(INSTRUMENTS):
        splits = _prepare_instrument(manifest, instrument, idx)
        payload["pools"][instrument.value] = {}
        for split_name, split_chunks in splits.items():
            entries = []
            for c in split_chunks:
                cid = chunk_id(c)
                rel = Path(instrument.value) / split_name / f"{cid}.wav"
                write_wav(pools_dir / rel, c.audio, "float32")
                entries.append(
                    {
                        "id": cid,
                        "wav": str(rel),
                        "source_id": c.source_id,
                        "offset": c.offset,
                        "chroma": [float(x) for x in c.chroma],
                        "envelope": [float(x) for x in c.envelope],
                    }
                )
            payload["pools"][instrument.value][split_name] = entries
    index_path = pools_dir / "pools.json"
    index_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    _write_run_record(manifest, "prepare", {"pools": str(index_path)})
    return index_path


def load_pools(manifest: ExperimentManifest) -> dict[str, dict[str, list[StemChunk]]]:
    """Read prepared pools back, with cached features attached."""
    pools_dir = manifest.pools_path
    payload = json.loads((pools_dir / "pools.json").read_text())
    if payload["sample_rate"] != manifest.sample_rate:
        raise ValueError("pool sample rate differs from manifest")
    out: dict[str, dict[str, list[StemChunk]]] = {}
    for instrument, splits in payload["pools"].items():
        out[instrument] = {}
        for split_name, entries in splits.items():
            chunks = []
            for e in entries:
                w = read_wav(pools_dir / e["wav"], expect_rate=manifest.sample_rate)
                c = StemChunk(
                    audio=w,
                    instrument=instrument,
                    source_id=e["source_id"],
                    offset=e["offset"],
                    chroma=np.asarray(e["chroma"]),
                    envelope=np.asarray(e["envelope"]),
                )
                chunks.append(c)
            out[instrument][split_name] = chunks
    return out


# --------------------------------------------------------------------------
# pair index
# --------------------------------------------------------------------------


def _index_path(manifest: ExperimentManifest, split: str) -> Path:
    return manifest.out_path / f"{split}_pairs.csv"


def cmd_pair_index(manifest: ExperimentManifest, pools=None) -> dict[str, Path]:
    """Build and persist the candidate-pair index for each split."""
    if pools is None:
        pools = load_pools(manifest)
    paths = {}
    for split in ("train", "valid"):
        violins = pools["violin"][split]
        pianos = pools["piano"][split]
        if not violins or not pianos:
            continue
        index = build_pair_index(
            violins,
            pianos,
            mode=manifest.mode.pair_mode,
            thresholds=manifest.thresholds,
            statistic=manifest.corr_statistic,
        )
        path = _index_path(manifest, split)
        save_pair_index(index, path)
        paths[split] = path
    _write_run_record(manifest, "pair-index", {"indexes": {k: str(v) for k, v in paths.items()}})
    return paths


def _load_or_build_index(manifest, pools, split) -> PairIndex | None:
    if manifest.mode.pair_mode is PairMode.RANDOM:
        return None
    path = _index_path(manifest, split)
    if path.exists():
        return load_pair_index(path, manifest.thresholds)
    index = build_pair_index(
        pools["violin"][split],
        pools["piano"][split],
        mode=manifest.mode.pair_mode,
        thresholds=manifest.thresholds,
        statistic=manifest.corr_statistic,
    )
    save_pair_index(index, path)
    return index


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _write_history_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "train_loss", "valid_loss", "lr"])
        for row in history:
            out.writerow(
                [row["epoch"], f"{row['train_loss']:.8e}", f"{row['valid_loss']:.8e}",
                 f"{row['lr']:.3e}"]
            )


def checkpoint_path(manifest: ExperimentManifest, instrument: str) -> Path:
    return manifest.out_path / "checkpoints" / f"{instrument}.npz"


def cmd_train(manifest: ExperimentManifest, verbose: int = 0) -> dict[str, Path]:
    """Train one mask model per instrument; write checkpoints + loss history."""
    pools = load_pools(manifest)
    train_v, train_p = pools["violin"]["train"], pools["piano"]["train"]
    valid_v, valid_p = pools["violin"]["valid"], pools["piano"]["valid"]
    train_index = _load_or_build_index(manifest, pools, "train")
    has_valid = bool(valid_v) and bool(valid_p)
    valid_index = _load_or_build_index(manifest, pools, "valid") if has_valid else None

    n_pairs = manifest.n_pairs
    seed_train = subseed(manifest.seed, _SEED_TRAIN)
    seed_valid = subseed(manifest.seed, _SEED_VALID)

    def train_stream(epoch: int):
        return epoch_examples(
            train_v, train_p, manifest.mode, n_pairs, seed_train, epoch, index=train_index
        )

    valid_stream = None
    if has_valid:

        def valid_stream(epoch: int):
            return epoch_examples(
                valid_v,
                valid_p,
                manifest.mode,
                manifest.valid_pairs_per_epoch,
                seed_valid,
                epoch,
                index=valid_index,
            )

    outputs = {}
    for idx, instrument in enumerate(INSTRUMENTS):
        est = MaskEstimator(
            instrument=instrument.value,
            model=manifest.model,
            train=manifest.train,
            stft_cfg=manifest.stft_cfg(),
            seed=subseed(manifest.seed, _SEED_MODEL, idx),
            cache_dir=str(manifest.cache_path),
            verbose=verbose,
        )
        est.fit(train_stream, valid_stream)
        path = checkpoint_path(manifest, instrument.value)
        save_checkpoint(est, path)
        _write_history_csv(manifest.out_path / f"history_{instrument.value}.csv", est.history_)
        outputs[instrument.value] = path
    _write_run_record(manifest, "train", {"checkpoints": {k: str(v) for k, v in outputs.items()}})
    return outputs


# --------------------------------------------------------------------------
# separate / evaluate / report
# --------------------------------------------------------------------------


def cmd_separate(manifest: ExperimentManifest, input_path, output_dir=None) -> dict[str, Path]:
    """Separate one mixture WAV with the experiment's trained models."""
    model_v = load_checkpoint(checkpoint_path(manifest, "violin"))
    model_p = load_checkpoint(checkpoint_path(manifest, "piano"))
    w = read_wav(input_path, expect_rate=manifest.sample_rate)
    est_v, est_p = separate(model_v, model_p, w, gl_iters=manifest.gl_iters)
    out_dir = Path(output_dir) if output_dir else manifest.out_path / "separated"
    stem = Path(input_path).stem
    paths = {}
    for name, wave in (("violin", est_v), ("piano", est_p)):
        path = out_dir / f"{stem}_{name}.wav"
        write_wav(path, wave, "float32")
        paths[name] = path
    return paths


def _evaluate_entry(
    entry: TestEntry,
    manifest: ExperimentManifest,
    methods: tuple[str, ...],
    pgm_dir: Path | None,
) -> list[tuple[str, EvalScores]]:
    cfg = manifest.stft_cfg()
    v = read_wav(entry.violin, expect_rate=manifest.sample_rate)
    p = read_wav(entry.piano, expect_rate=manifest.sample_rate)
    check_same_length(v, p)
    mixture, tv, tp, _ = mix_waveforms(v, p)
    refs = [tv, tp]

    spec_mix = dsp.stft(mixture, cfg)
    mix_mag = np.abs(spec_mix.data)
    mix_phase = spec_mix.phase()

    estimates: dict[str, tuple[Waveform, Waveform]] = {}
    est_mags: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for method in methods:
        if method == "mixture":
            estimates[method] = (mixture, mixture)
        elif method == "oracle_irm":
            mag_v = np.abs(dsp.stft(tv, cfg).data)
            mag_p = np.abs(dsp.stft(tp, cfg).data)
            est_v = oracle_irm(mag_v, mag_p) * mix_mag
            est_p = oracle_irm(mag_p, mag_v) * mix_mag
            est_mags[method] = (est_v, est_p)
            estimates[method] = (
                resynthesize(est_v, cfg, manifest.sample_rate, mix_phase, len(mixture), manifest.gl_iters),
                resynthesize(est_p, cfg, manifest.sample_rate, mix_phase, len(mixture), manifest.gl_iters),
            )
        elif method == "model":
            model_v = _cached_model(str(checkpoint_path(manifest, "violin")))
            model_p = _cached_model(str(checkpoint_path(manifest, "piano")))
            est_mags[method] = (model_v.predict(mix_mag), model_p.predict(mix_mag))
            estimates[method] = separate(model_v, model_p, mixture, gl_iters=manifest.gl_iters)
        else:
            raise ValueError(f"unknown evaluation method {method!r}")

    rows: list[tuple[str, EvalScores]] = []
    for method, (est_v, est_p) in estimates.items():
        for true_index, (instrument, est) in enumerate(
            (("violin", est_v), ("piano", est_p))
        ):
            dec = decompose(est, refs, true_index=true_index, filter_len=manifest.bss_filter_len)
            rows.append((method, scores(dec, entry.mixture_id, instrument)))

    if pgm_dir is not None:
        write_pgm(pgm_dir / f"{entry.mixture_id}_mixture.pgm", mix_mag)
        for method, (mv, mp) in est_mags.items():
            write_pgm(pgm_dir / f"{entry.mixture_id}_{method}_violin.pgm", mv)
            write_pgm(pgm_dir / f"{entry.mixture_id}_{method}_piano.pgm", mp)
    return rows


_MODEL_CACHE: dict[tuple[str, int], MaskEstimator] = {}


def _cached_model(path: str) -> MaskEstimator:
    key = (path, os.stat(path).st_mtime_ns)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = load_checkpoint(path)
    return _MODEL_CACHE[key]


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def cmd_evaluate(
    manifest: ExperimentManifest,
    testset_path,
    methods: tuple[str, ...] = ("model", "oracle_irm", "mixture"),
    pgm: bool = False,
) -> dict[str, Path]:
    """Score every test mixture with each method; write per-song and median CSVs."""
    testset = TestSetManifest.load(testset_path)
    out = manifest.out_path
    pgm_dir = out / "pgm" if pgm else None

    n_workers = _n_workers()
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            all_rows = list(
                pool.map(
                    _evaluate_entry,
                    testset.entries,
                    [manifest] * len(testset.entries),
                    [methods] * len(testset.entries),
                    [pgm_dir] * len(testset.entries),
                )
            )
    else:
        all_rows = [
            _evaluate_entry(entry, manifest, methods, pgm_dir) for entry in testset.entries
        ]

    by_method: dict[str, list[EvalScores]] = {m: [] for m in methods}
    for rows in all_rows:
        for method, score in rows:
            by_method[method].append(score)

    out.mkdir(parents=True, exist_ok=True)
    scores_path = out / "scores.csv"
    with open(scores_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "song_id", "instrument", "sdr", "sir", "sar"])
        for method in methods:
            for s in by_method[method]:
                writer.writerow(
                    [method, s.song_id, s.instrument, f"{s.sdr:.6f}", f"{s.sir:.6f}", f"{s.sar:.6f}"]
                )

    medians_path = out / "medians.csv"
    summary_lines = []
    with open(medians_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "instrument", "sdr", "sir", "sar", "n_songs"])
        for method in methods:
            for row in median_report(by_method[method]):
                writer.writerow(
                    [
                        method,
                        row["instrument"],
                        f"{row['sdr']:.6f}",
                        f"{row['sir']:.6f}",
                        f"{row['sar']:.6f}",
                        row["n_songs"],
                    ]
                )
                summary_lines.append(
                    f"{row['instrument']:<8} {method:<12} "
                    f"SDR {row['sdr']:7.2f}  SIR {row['sir']:7.2f}  SAR {row['sar']:7.2f}  "
                    f"(median over {row['n_songs']} songs)"
                )
    (out / "summary.txt").write_text("\n".join(summary_lines) + "\n")
    _write_run_record(manifest, "evaluate", {"scores": str(scores_path)})
    return {"scores": scores_path, "medians": medians_path}


def cmd_report(run_dirs: list, out_path) -> Path:
    """Combine several runs' median tables into one mode-by-mode report."""
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        record = json.loads((run_dir / "run.json").read_text())
        mode = record["commands"][-1]["manifest"]["mode"]
        with open(run_dir / "medians.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                label = mode if row["method"] == "model" else row["method"]
                rows.append(
                    {
                        "instrument": row["instrument"],
                        "method": label,
                        "sdr": row["sdr"],
                        "sir": row["sir"],
                        "sar": row["sar"],
                        "run": str(run_dir),
                    }
                )
    # baselines are identical across runs; keep the first of each label
    seen = set()
    unique_rows = []
    for row in rows:
        key = (row["instrument"], row["method"])
        if key in seen:
            continue
        seen.add(key)
        unique_rows.append(row)
    unique_rows.sort(key=lambda r: (r["instrument"], r["method"]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["instrument", "method", "sdr", "sir", "sar", "run"])
        writer.writeheader()
        writer.writerows(unique_rows)
    return out_path
