"""mixsep: training-data synthesis and evaluation for violin/piano separation."""

__version__ = "0.1.0"

from .audio_io import (
    Instrument,
    Interval,
    StemChunk,
    Waveform,
    chunk,
    read_wav,
    remove_silence,
    split_nonsilent,
    write_wav,
)
from .dsp import (
    MagSpectrogram,
    Spectrogram,
    StftConfig,
    chroma_mean,
    chromagram,
    griffin_lim,
    istft,
    stft,
)
from .effects import WetParams, apply_contrast, apply_peaking_eq, apply_reverb, pink_noise, wet_chain
from .mixer import AugMode, MixExample, Regime, epoch_examples, mix
from .pairing import (
    PairIndex,
    PairingThresholds,
    PairMode,
    build_pair_index,
    chroma_distance,
    corr_score,
    magnitude_envelope,
    sample_pairs,
)
from .separation import (
    MaskEstimator,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    oracle_irm,
    save_checkpoint,
    separate,
)
from .bsseval import EvalScores, decompose, median_report, scores
