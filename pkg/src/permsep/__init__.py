"""permsep: two-talker source separation with soft-minimum permutation training.

The pieces, in pipeline order: `mixgen` builds mixture datasets at exact
signal-to-interference ratios, `dsp` handles STFT analysis/synthesis,
`separator` is a mask-estimating LSTM with handwritten backprop,
`losses` provides the hard-min and soft-min permutation-invariant
objectives, `trainer` runs per-utterance Adam with a patience LR
schedule, and `bsseval` scores separated sources. `permsep.cli` wires it
all into the `permsep` command.
"""

__version__ = "0.1.0"

from .dsp import (
    MagSpectrogram,
    Spectrogram,
    Waveform,
    istft,
    magnitude_phase,
    read_wav,
    stft,
    write_wav,
)
from .losses import GammaParam, LossResult, pit_cost, select_test_permutation, softmin_loglik, trainable_loglik
from .mixgen import DatasetConfig, DatasetManifest, MixtureExample, build_dataset, mix_pair, speech_activity_trim, synth_speaker
from .permutation import Permutation, PermutationErrorTable, apply_permutation, enumerate_permutations, error_table
from .separator import ForwardTrace, SeparatorModel, backward, forward, load_checkpoint, reconstruct, save_checkpoint
from .bsseval import BssEvalScores, decompose, score
from .trainer import Adam, EpochRecord, TrainConfig, Utterance, flip_rate, load_split, lr_schedule_step, resume_training, train

__all__ = [
    "Adam",
    "BssEvalScores",
    "DatasetConfig",
    "DatasetManifest",
    "EpochRecord",
    "ForwardTrace",
    "GammaParam",
    "LossResult",
    "MagSpectrogram",
    "MixtureExample",
    "Permutation",
    "PermutationErrorTable",
    "SeparatorModel",
    "Spectrogram",
    "TrainConfig",
    "Utterance",
    "Waveform",
    "apply_permutation",
    "backward",
    "build_dataset",
    "decompose",
    "enumerate_permutations",
    "error_table",
    "flip_rate",
    "forward",
    "istft",
    "load_checkpoint",
    "load_split",
    "lr_schedule_step",
    "magnitude_phase",
    "mix_pair",
    "pit_cost",
    "read_wav",
    "reconstruct",
    "resume_training",
    "save_checkpoint",
    "score",
    "select_test_permutation",
    "softmin_loglik",
    "speech_activity_trim",
    "stft",
    "synth_speaker",
    "train",
    "trainable_loglik",
    "write_wav",
]
