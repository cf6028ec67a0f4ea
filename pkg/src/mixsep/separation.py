"""Mask-based spectrogram separation.

``MaskEstimator`` is a small trainable mask network: it crops the input
magnitude spectrogram to the sub-16 kHz band, predicts a mask for the
cropped band from a per-frame window of context, expands it back to the
full band, and multiplies it onto the mixture.  Training minimizes the
mean squared error between the masked mixture magnitude and the target
stem magnitude, with momentum SGD, early stopping on validation loss, and
a plateau learning-rate scheduler.

``oracle_irm`` provides the ideal-ratio-mask reference separator used as an
upper bound in evaluation.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import dsp
from .audio_io import Waveform
from .dsp import MagSpectrogram, Spectrogram, StftConfig
from .mixer import MixExample
from .validation import check_magnitude_matrix

EpochStream = Callable[[int], Iterable[MixExample]]

IRM_EPS = 1e-10


class TrainingDivergedError(RuntimeError):
    """Training or validation loss became non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    """Mask-network dimensions.

    ``crop_bins`` defaults to the number of STFT bins at or below 16 kHz for
    the 4096-point transform at 44.1 kHz.  The full-band expansion is an
    affine map factored through ``expansion_rank`` to keep it cheap; set
    ``expansion_rank=None`` for a dense expansion.  The mask activation is a
    sigmoid followed by a [0, 1] clamp after expansion.
    """

    crop_bins: int = 1487
    hidden_dim: int = 256
    context: int = 1
    expansion_rank: int | None = 64

    def __post_init__(self):
        if self.crop_bins < 1:
            raise ValueError("crop_bins must be positive")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.context < 0:
            raise ValueError("context must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    patience: int = 140
    max_epochs: int = 1000
    lr_halve_patience: int = 80
    frames_per_step: int | None = None
    min_delta: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def init_params(
    cfg: ModelConfig, n_bins: int, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Random parameter tensors for one mask network."""
    if cfg.crop_bins > n_bins:
        raise ValueError(f"crop_bins {cfg.crop_bins} exceeds spectrogram bins {n_bins}")
    c, h, r = cfg.crop_bins, cfg.hidden_dim, cfg.expansion_rank
    d_in = (2 * cfg.context + 1) * c

    def w(rows, cols, scale):
        return (rng.standard_normal((rows, cols)) * scale).astype(dtype)

    params = {
        "w1": w(d_in, h, 1.0 / np.sqrt(d_in)),
        "b1": np.zeros(h, dtype=dtype),
        "w2": w(h, h, 1.0 / np.sqrt(h)),
        "b2": np.zeros(h, dtype=dtype),
        "w3": w(h, c, 1.0 / np.sqrt(h)),
        "b3": np.zeros(c, dtype=dtype),
        # start the expansion near a 0.5 mask so the clamp sits in its
        # linear region
        "b4": np.full(n_bins, 0.5, dtype=dtype),
    }
    if r is None:
        params["w4"] = w(c, n_bins, 0.1 / np.sqrt(c))
    else:
        params["w4a"] = w(c, r, 1.0 / np.sqrt(c))
        params["w4b"] = w(r, n_bins, 0.1 / np.sqrt(r))
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(
    params: dict[str, np.ndarray], z: np.ndarray, mix_rows: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Run the mask network on pre-normalized context rows.

    ``z`` is (batch, (2*context+1)*crop_bins); ``mix_rows`` is the full-band
    mixture magnitude at the same frames.  Returns the estimated magnitude
    and a cache for backprop.
    """
    h1 = np.tanh(z @ params["w1"] + params["b1"])
    h2 = np.tanh(h1 @ params["w2"] + params["b2"])
    mask_crop = _sigmoid(h2 @ params["w3"] + params["b3"])
    if "w4" in params:
        pre = mask_crop @ params["w4"] + params["b4"]
        t4 = None
    else:
        t4 = mask_crop @ params["w4a"]
        pre = t4 @ params["w4b"] + params["b4"]
    mask = np.clip(pre, 0.0, 1.0)
    est = mask * mix_rows
    cache = {"z": z, "h1": h1, "h2": h2, "mask_crop": mask_crop, "t4": t4,
             "pre": pre, "mask": mask, "mix": mix_rows}
    return est, cache


def loss_and_grads(
    params: dict[str, np.ndarray],
    z: np.ndarray,
    mix_rows: np.ndarray,
    tgt_rows: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared spectrogram error and its parameter gradients."""
    est, cache = forward(params, z, mix_rows)
    diff = est - tgt_rows
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    d_est = (2.0 / diff.size) * diff
    d_mask = d_est * cache["mix"]
    inside = (cache["pre"] > 0.0) & (cache["pre"] < 1.0)
    d_pre = np.where(inside, d_mask, 0.0).astype(d_mask.dtype)

    grads: dict[str, np.ndarray] = {"b4": d_pre.sum(axis=0)}
    if "w4" in params:
        grads["w4"] = cache["mask_crop"].T @ d_pre
        d_mc = d_pre @ params["w4"].T
    else:
        grads["w4b"] = cache["t4"].T @ d_pre
        d_t4 = d_pre @ params["w4b"].T
        grads["w4a"] = cache["mask_crop"].T @ d_t4
        d_mc = d_t4 @ params["w4a"].T
    mc = cache["mask_crop"]
    d_u3 = d_mc * mc * (1.0 - mc)
    grads["w3"] = cache["h2"].T @ d_u3
    grads["b3"] = d_u3.sum(axis=0)
    d_h2 = d_u3 @ params["w3"].T
    d_u2 = d_h2 * (1.0 - cache["h2"] ** 2)
    grads["w2"] = cache["h1"].T @ d_u2
    grads["b2"] = d_u2.sum(axis=0)
    d_h1 = d_u2 @ params["w2"].T
    d_u1 = d_h1 * (1.0 - cache["h1"] ** 2)
    grads["w1"] = cache["z"].T @ d_u1
    grads["b1"] = d_u1.sum(axis=0)
    return loss, grads


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "-", name)


class _SpecCache:
    """Per-chunk complex spectrograms, keyed by chunk id.

    Examples carry the chunk ids and the joint peak scale of the mix, so the
    unscaled chunk spectrogram is recoverable and reusable across epochs.
    With a directory the arrays live on disk and are memory-mapped back.
    """

    def __init__(self, directory: Path | None, cfg: StftConfig):
        self.cfg = cfg
        self.dir = None
        if directory is not None:
            self.dir = Path(directory) / f"stft_{cfg.n_fft}x{cfg.hop}"
            self.dir.mkdir(parents=True, exist_ok=True)
        self.ram: dict[str, np.ndarray] = {}

    def chunk_spec(self, cid: str, scaled_wave: Waveform, scale: float) -> np.ndarray:
        hit = self.ram.get(cid)
        if hit is not None:
            return hit
        if self.dir is not None:
            path = self.dir / f"{_sanitize(cid)}.npy"
            if not path.exists():
                spec = dsp.stft(scaled_wave, self.cfg).data.astype(np.complex64)
                if scale != 1.0:
                    spec /= np.complex64(scale)
                tmp = path.with_suffix(".tmp.npy")
                np.save(tmp, spec)
                tmp.replace(path)
            arr = np.load(path, mmap_mode="r")
        else:
            arr = dsp.stft(scaled_wave, self.cfg).data.astype(np.complex64)
            if scale != 1.0:
                arr = arr / np.complex64(scale)
        self.ram[cid] = arr
        return arr


class MaskEstimator(BaseEstimator):
    """Trainable full-band mask separator for one target instrument.

    Follows the scikit-learn estimator protocol: hyperparameters in
    ``__init__``, learned state in trailing-underscore attributes after
    :meth:`fit`, and :meth:`predict` mapping a mixture magnitude spectrogram
    to the estimated target magnitude.
    """

    def __init__(
        self,
        instrument: str = "violin",
        model: ModelConfig | None = None,
        train: TrainConfig | None = None,
        stft_cfg: StftConfig | None = None,
        seed: int = 0,
        dtype: str = "float32",
        cache_dir: str | None = None,
        verbose: int = 0,
    ):
        self.instrument = instrument
        self.model = model
        self.train = train
        self.stft_cfg = stft_cfg
        self.seed = seed
        self.dtype = dtype
        self.cache_dir = cache_dir
        self.verbose = verbose

    # -- configuration ----------------------------------------------------

    def _model_cfg(self) -> ModelConfig:
        return self.model if self.model is not None else ModelConfig()

    def _train_cfg(self) -> TrainConfig:
        return self.train if self.train is not None else TrainConfig()

    def _stft_cfg(self) -> StftConfig:
        return self.stft_cfg if self.stft_cfg is not None else StftConfig()

    def _np_dtype(self):
        return np.dtype(self.dtype)

    # -- data plumbing ----------------------------------------------------

    def _target_wave(self, ex: MixExample) -> Waveform:
        if self.instrument == "violin":
            return ex.target_violin
        if self.instrument == "piano":
            return ex.target_piano
        raise ValueError(f"unknown instrument {self.instrument!r}")

    def _example_rows(
        self,
        ex: MixExample,
        cache: _SpecCache,
        rng: np.random.Generator,
        frames_per_step: int | None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sampled (context, mix rows, target rows) tensors for one example."""
        cfg = self._stft_cfg()
        mcfg = self._model_cfg()
        crop = mcfg.crop_bins
        dt = self._np_dtype()

        if ex.violin_id is not None and ex.piano_id is not None:
            sv = cache.chunk_spec(ex.violin_id, ex.target_violin, ex.scale)
            sp = cache.chunk_spec(ex.piano_id, ex.target_piano, ex.scale)
            n_frames = sv.shape[0]
            rows = self._sample_rows(n_frames, rng, frames_per_step)
            mix_rows = np.abs(sv[rows] + sp[rows]).astype(dt) * dt.type(ex.scale)
            tgt_spec = sv if self.instrument == "violin" else sp
            tgt_rows = np.abs(tgt_spec[rows]).astype(dt) * dt.type(ex.scale)
            ctx_parts = []
            for off in range(-mcfg.context, mcfg.context + 1):
                r = np.clip(rows + off, 0, n_frames - 1)
                part = np.abs(sv[r, :crop] + sp[r, :crop]).astype(dt) * dt.type(ex.scale)
                ctx_parts.append(part)
        else:
            mix_mag = np.abs(dsp.stft(ex.mixture, cfg).data)
            tgt_mag = np.abs(dsp.stft(self._target_wave(ex), cfg).data)
            n_frames = mix_mag.shape[0]
            rows = self._sample_rows(n_frames, rng, frames_per_step)
            mix_rows = mix_mag[rows].astype(dt)
            tgt_rows = tgt_mag[rows].astype(dt)
            ctx_parts = []
            for off in range(-mcfg.context, mcfg.context + 1):
                r = np.clip(rows + off, 0, n_frames - 1)
                ctx_parts.append(mix_mag[r, :crop].astype(dt))

        z = np.hstack([self._normalize(p) for p in ctx_parts])
        return z, mix_rows, tgt_rows

    @staticmethod
    def _sample_rows(n_frames, rng, frames_per_step):
        if frames_per_step is not None and frames_per_step < n_frames:
            return np.sort(rng.choice(n_frames, size=frames_per_step, replace=False))
        return np.arange(n_frames)

    def _normalize(self, cropped: np.ndarray) -> np.ndarray:
        return (cropped - self.scaler_mean_) / self.scaler_std_

    # -- training ---------------------------------------------------------

    def fit(self, train_stream: EpochStream, valid_stream: EpochStream | None = None):
        """Train on per-epoch example streams; keeps the best-validation state.

        Both streams are callables mapping an epoch number to an iterable of
        mix examples (redrawn each epoch).
        """
        mcfg = self._model_cfg()
        tcfg = self._train_cfg()
        scfg = self._stft_cfg()
        dt = self._np_dtype()
        rng = np.random.default_rng(np.random.SeedSequence([0x5EB, int(self.seed)]))
        cache = _SpecCache(Path(self.cache_dir) if self.cache_dir else None, scfg)

        # Freeze the input scaler on the first epoch's mixtures.  Streams are
        # deterministic per epoch, so epoch 0 is simply iterated again when
        # training starts.
        self.scaler_mean_ = np.zeros(mcfg.crop_bins, dtype=dt)
        self.scaler_std_ = np.ones(mcfg.crop_bins, dtype=dt)
        stats_rng = np.random.default_rng(np.random.SeedSequence([0x5CA1E, int(self.seed)]))
        count = 0
        total = np.zeros(mcfg.crop_bins, dtype=np.float64)
        total_sq = np.zeros(mcfg.crop_bins, dtype=np.float64)
        for ex in train_stream(0):
            _, mix_rows, _ = self._example_rows(ex, cache, stats_rng, tcfg.frames_per_step)
            cropped = mix_rows[:, : mcfg.crop_bins].astype(np.float64)
            total += cropped.sum(axis=0)
            total_sq += (cropped**2).sum(axis=0)
            count += cropped.shape[0]
        if count == 0:
            raise ValueError("training stream yielded no examples")
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        self.scaler_mean_ = mean.astype(dt)
        self.scaler_std_ = np.maximum(np.sqrt(var), 1e-6).astype(dt)

        params = init_params(mcfg, scfg.n_bins, rng, dt)
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        best_params = copy.deepcopy(params)
        best_val = np.inf
        best_epoch = -1
        lr = tcfg.lr
        since_improve = 0
        lr_since_improve = 0
        history: list[dict] = []

        for epoch in range(tcfg.max_epochs):
            examples = train_stream(epoch)
            train_losses = []
            for ex in examples:
                z, mix_rows, tgt_rows = self._example_rows(
                    ex, cache, rng, tcfg.frames_per_step
                )
                loss, grads = loss_and_grads(params, z, mix_rows, tgt_rows)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}"
                    )
                for k, g in grads.items():
                    velocity[k] = tcfg.momentum * velocity[k] - lr * g
                    params[k] += velocity[k]
                train_losses.append(loss)
            train_loss = float(np.mean(train_losses))

            if valid_stream is not None:
                val_losses = []
                for ex in valid_stream(epoch):
                    z, mix_rows, tgt_rows = self._example_rows(
                        ex, cache, rng, tcfg.frames_per_step
                    )
                    est, _ = forward(params, z, mix_rows)
                    val_losses.append(
                        float(np.mean((est.astype(np.float64) - tgt_rows) ** 2))
                    )
                if not val_losses:
                    raise ValueError("validation stream yielded no examples")
                val_loss = float(np.mean(val_losses))
            else:
                val_loss = train_loss
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")

            history.append(
                {"epoch": epoch, "train_loss": train_loss, "valid_loss": val_loss, "lr": lr}
            )
            if self.verbose:
                print(f"[{self.instrument}] epoch {epoch}: train {train_loss:.3e} "
                      f"valid {val_loss:.3e} lr {lr:.2e}")

            if val_loss < best_val - tcfg.min_delta:
                best_val = val_loss
                best_epoch = epoch
                best_params = copy.deepcopy(params)
                since_improve = 0
                lr_since_improve = 0
            else:
                since_improve += 1
                lr_since_improve += 1
                if lr_since_improve >= tcfg.lr_halve_patience:
                    lr *= 0.5
                    lr_since_improve = 0
                if since_improve >= tcfg.patience:
                    break

        self.params_ = best_params
        self.history_ = history
        self.best_val_loss_ = None if best_epoch < 0 else best_val
        self.best_epoch_ = best_epoch
        self.n_bins_ = scfg.n_bins
        return self

    # -- inference ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("MaskEstimator must be fitted (or loaded) first")

    def _context_matrix(self, mag: np.ndarray) -> np.ndarray:
        mcfg = self._model_cfg()
        crop = mag[:, : mcfg.crop_bins].astype(self._np_dtype())
        n = crop.shape[0]
        idx = np.arange(n)
        parts = []
        for off in range(-mcfg.context, mcfg.context + 1):
            parts.append(self._normalize(crop[np.clip(idx + off, 0, n - 1)]))
        return np.hstack(parts)

    def _as_matrix(self, x) -> np.ndarray:
        return check_magnitude_matrix(x, self.n_bins_)

    def predict_mask(self, mix_mag) -> np.ndarray:
        """Full-band mask in [0, 1] for a mixture magnitude spectrogram."""
        self._check_fitted()
        mag = self._as_matrix(mix_mag)
        z = self._context_matrix(mag)
        _, cache = forward(self.params_, z, mag.astype(self._np_dtype()))
        return cache["mask"]

    def predict(self, mix_mag) -> np.ndarray:
        """Estimated target magnitude: predicted mask times the mixture."""
        self._check_fitted()
        mag = self._as_matrix(mix_mag)
        return self.predict_mask(mag) * mag

    transform = predict


def oracle_irm(target_mag, other_mag, eps: float = IRM_EPS) -> np.ndarray:
    """Ideal ratio mask target/(target + other + eps) from reference magnitudes."""
    t = target_mag.data if isinstance(target_mag, MagSpectrogram) else np.asarray(target_mag)
    o = other_mag.data if isinstance(other_mag, MagSpectrogram) else np.asarray(other_mag)
    if t.shape != o.shape:
        raise ValueError(f"magnitude shape mismatch: {t.shape} vs {o.shape}")
    return t / (t + o + eps)


def resynthesize(
    est_mag: np.ndarray,
    cfg: StftConfig,
    sample_rate: int,
    mix_phase: np.ndarray,
    length: int,
    gl_iters: int = dsp.DEFAULT_GRIFFIN_LIM_ITERS,
) -> Waveform:
    """Griffin-Lim resynthesis of an estimated magnitude, starting from the
    mixture phase, trimmed/padded to ``length`` samples."""
    mag = MagSpectrogram(np.asarray(est_mag, dtype=np.float64), cfg, sample_rate)
    wave = dsp.griffin_lim(mag, init_phase=mix_phase, iters=gl_iters)
    x = wave.samples
    if x.size < length:
        x = np.concatenate([x, np.zeros(length - x.size)])
    return Waveform(x[:length], sample_rate)


def separate(
    model_violin: MaskEstimator,
    model_piano: MaskEstimator,
    w: Waveform,
    gl_iters: int = dsp.DEFAULT_GRIFFIN_LIM_ITERS,
) -> tuple[Waveform, Waveform]:
    """Separate a mixture into (violin, piano) waveform estimates."""
    cfg = model_violin._stft_cfg()
    spec = dsp.stft(w, cfg)
    mag = np.abs(spec.data)
    phase = spec.phase()
    outs = []
    for model in (model_violin, model_piano):
        est = model.predict(mag)
        outs.append(resynthesize(est, cfg, w.sample_rate, phase, len(w), gl_iters))
    return outs[0], outs[1]


CHECKPOINT_VERSION = 1


def save_checkpoint(est: MaskEstimator, path) -> None:
    """Write a fitted estimator as a versioned npz container."""
    est._check_fitted()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = {
        "instrument": est.instrument,
        "model": asdict(est._model_cfg()),
        "stft": asdict(est._stft_cfg()),
        "seed": est.seed,
        "dtype": est.dtype,
    }
    train_cfg = asdict(est._train_cfg())
    meta = {
        "best_val_loss": est.best_val_loss_,
        "best_epoch": est.best_epoch_,
        "n_epochs": len(est.history_),
    }
    arrays = {f"param_{k}": v for k, v in est.params_.items()}
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        config_json=np.array(json.dumps(config, sort_keys=True)),
        train_json=np.array(json.dumps(train_cfg, sort_keys=True)),
        meta_json=np.array(json.dumps(meta, sort_keys=True)),
        scaler_mean=est.scaler_mean_,
        scaler_std=est.scaler_std_,
        **arrays,
    )


def load_checkpoint(path) -> MaskEstimator:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(str(data["config_json"]))
        train_cfg = json.loads(str(data["train_json"]))
        meta = json.loads(str(data["meta_json"]))
        est = MaskEstimator(
            instrument=config["instrument"],
            model=ModelConfig(**config["model"]),
            train=TrainConfig(**{k: v for k, v in train_cfg.items()}),
            stft_cfg=StftConfig(**config["stft"]),
            seed=config["seed"],
            dtype=config["dtype"],
        )
        est.params_ = {
            k[len("param_") :]: data[k] for k in data.files if k.startswith("param_")
        }
        est.scaler_mean_ = data["scaler_mean"]
        est.scaler_std_ = data["scaler_std"]
        est.best_val_loss_ = meta["best_val_loss"]
        est.best_epoch_ = meta["best_epoch"]
        est.history_ = []
        est.n_bins_ = est._stft_cfg().n_bins
    return est
