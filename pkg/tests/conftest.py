"""Shared fabricators for the test suite.

Most tests want a MagSpectrogram or a batch of Utterances without going
through WAV files; these helpers construct geometry-consistent grids
directly (frame_len = 2*(F-1), hop = frame_len/2, n_samples = T*hop).
"""

import numpy as np

from permsep.dsp import MagSpectrogram
from permsep.trainer import Utterance


def mag_grid(frames, sample_rate=8000):
    """Wrap a (T, F) array in a MagSpectrogram with consistent geometry."""
    frames = np.asarray(frames, dtype=np.float64)
    t, f = frames.shape
    frame_len = 2 * (f - 1)
    hop = frame_len // 2
    return MagSpectrogram(
        frames=frames,
        frame_len=frame_len,
        hop=hop,
        sample_rate=sample_rate,
        n_samples=t * hop,
    )


def random_mag(t, f, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return mag_grid(scale * rng.random((t, f)))


def toy_utterances(n, t=12, f=5, seed=0, scale=1.0):
    """Fabricated 2-source utterances; the mixture magnitude is the sum
    of the source magnitudes, which is what an ideal separable mixture
    looks like in this feature space."""
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n):
        srcs = scale * rng.random((2, t, f))
        utts.append(Utterance(f"toy{i:03d}", mag_grid(srcs.sum(axis=0)), srcs))
    return utts
