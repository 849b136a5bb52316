"""Waveforms, STFT analysis/synthesis, and WAV I/O.

Analysis uses a periodic Hann window at 50% shift, which satisfies
constant overlap-add: w[n] + w[n + hop] == 1 for every n. Frames are laid
out so that T = ceil(n_samples / hop): the signal is padded with `hop`
zeros in front and up to a whole number of hops behind, every real sample
is then covered by analysis weight summing to 1, and the inverse divides
the overlap-add by the actual per-sample window sum before trimming the
padding back off. Round-trip error is at the level of fp64 FFT noise.
"""

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GeometryError, IngestionError

DEFAULT_SAMPLE_RATE = 8000

# Overlap-add weights below this are treated as uncovered and synthesize 0.
_WINDOW_SUM_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono float64 signal plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise ValueError(f"sample_rate must be a positive int, got {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def _check_grid(frames, frame_len, hop, n_samples):
    if frames.ndim != 2:
        raise GeometryError(f"spectrogram frames must be 2-D, got shape {frames.shape}")
    if frame_len <= 0 or frame_len % 2 != 0:
        raise GeometryError(f"frame_len must be a positive even int, got {frame_len}")
    if hop != frame_len // 2:
        raise GeometryError(f"hop must equal frame_len/2, got hop={hop} frame_len={frame_len}")
    n_frames, n_bins = frames.shape
    if n_bins != frame_len // 2 + 1:
        raise GeometryError(
            f"expected {frame_len // 2 + 1} bins for frame_len={frame_len}, got {n_bins}"
        )
    if n_samples < 0:
        raise GeometryError(f"n_samples must be >= 0, got {n_samples}")
    expected_t = -(-n_samples // hop)  # ceil
    if n_frames != expected_t:
        raise GeometryError(
            f"frame count {n_frames} inconsistent with n_samples={n_samples} "
            f"(expected ceil(n/hop) = {expected_t})"
        )


@dataclass
class Spectrogram:
    """Complex STFT grid of shape (T, F) with its analysis geometry.

    `n_samples` records the original signal length so `istft` can trim
    the synthesis padding exactly.
    """

    frames: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int
    n_samples: int
    window_id: str = "hann"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        _check_grid(self.frames, self.frame_len, self.hop, self.n_samples)
        if self.window_id != "hann":
            raise ConfigurationError(f"unsupported window {self.window_id!r}")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]


@dataclass
class MagSpectrogram:
    """Nonnegative magnitude grid sharing `Spectrogram`'s geometry fields."""

    frames: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int
    n_samples: int
    window_id: str = "hann"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        _check_grid(self.frames, self.frame_len, self.hop, self.n_samples)
        if self.frames.size and self.frames.min() < 0:
            raise ValueError("magnitude spectrogram has negative entries")
        if self.window_id != "hann":
            raise ConfigurationError(f"unsupported window {self.window_id!r}")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]

    def with_frames(self, frames):
        """New MagSpectrogram with the same geometry and different values."""
        return MagSpectrogram(
            frames=frames,
            frame_len=self.frame_len,
            hop=self.hop,
            sample_rate=self.sample_rate,
            n_samples=self.n_samples,
            window_id=self.window_id,
        )


def same_geometry(a, b):
    """True when two grids share frame_len/hop/sample_rate/n_samples/shape."""
    return (
        a.frame_len == b.frame_len
        and a.hop == b.hop
        and a.sample_rate == b.sample_rate
        and a.n_samples == b.n_samples
        and a.frames.shape == b.frames.shape
    )


def hann_window(frame_len):
    """Periodic Hann window: 0.5 * (1 - cos(2*pi*k / N)), k = 0..N-1."""
    k = np.arange(frame_len)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / frame_len))


def frame_length_for(frame_ms, sample_rate):
    """Frame length in samples for a duration in ms; must be a positive even int."""
    exact = frame_ms * sample_rate / 1000.0
    frame_len = int(round(exact))
    if abs(exact - frame_len) > 1e-9 or frame_len <= 0 or frame_len % 2 != 0:
        raise ConfigurationError(
            f"frame_ms={frame_ms} at {sample_rate} Hz gives {exact} samples; "
            "need a positive even integer"
        )
    return frame_len


def stft(waveform, frame_ms=32.0, shift_fraction=0.5):
    """Short-time Fourier transform.

    Args:
        waveform: Waveform to analyze.
        frame_ms: frame duration in milliseconds; must convert to an even
            integer sample count at the waveform's rate.
        shift_fraction: frame shift as a fraction of the frame; only 0.5
            is supported (the Hann COLA condition relies on it).

    Returns:
        Spectrogram with frames.shape == (ceil(n/hop), frame_len/2 + 1).
    """
    if shift_fraction != 0.5:
        raise ConfigurationError(f"shift_fraction must be 0.5, got {shift_fraction}")
    frame_len = frame_length_for(frame_ms, waveform.sample_rate)
    hop = frame_len // 2
    n = len(waveform)
    n_frames = -(-n // hop)
    if n_frames == 0:
        frames = np.zeros((0, frame_len // 2 + 1), dtype=np.complex128)
        return Spectrogram(frames, frame_len, hop, waveform.sample_rate, 0)
    padded = np.zeros((n_frames + 1) * hop, dtype=np.float64)
    padded[hop : hop + n] = waveform.samples
    segments = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[::hop]
    frames = np.fft.rfft(segments * hann_window(frame_len), axis=1)
    return Spectrogram(frames, frame_len, hop, waveform.sample_rate, n)


def istft(spec):
    """Inverse STFT by overlap-add with window-sum normalization.

    Synthesizes the padded signal, divides each sample by its total
    analysis-window weight (samples with weight below 1e-10 become 0),
    and trims the `hop` leading pad plus the tail to `n_samples`.
    """
    if spec.n_frames == 0:
        return Waveform(np.zeros(0), spec.sample_rate)
    frame_len, hop = spec.frame_len, spec.hop
    segments = np.fft.irfft(spec.frames, n=frame_len, axis=1)
    total = (spec.n_frames + 1) * hop
    acc = np.zeros(total, dtype=np.float64)
    wsum = np.zeros(total, dtype=np.float64)
    window = hann_window(frame_len)
    for t in range(spec.n_frames):
        start = t * hop
        acc[start : start + frame_len] += segments[t]
        wsum[start : start + frame_len] += window
    covered = wsum > _WINDOW_SUM_FLOOR
    out = np.zeros(total, dtype=np.float64)
    out[covered] = acc[covered] / wsum[covered]
    return Waveform(out[hop : hop + spec.n_samples], spec.sample_rate)


def magnitude_phase(spec):
    """Split a complex spectrogram into (MagSpectrogram, phase array).

    Zero entries get magnitude 0 and phase 0 (numpy's angle convention),
    so magnitude * exp(1j * phase) reproduces the input to fp precision.
    """
    mag = MagSpectrogram(
        frames=np.abs(spec.frames),
        frame_len=spec.frame_len,
        hop=spec.hop,
        sample_rate=spec.sample_rate,
        n_samples=spec.n_samples,
        window_id=spec.window_id,
    )
    return mag, np.angle(spec.frames)


def rebuild_complex(mag, phase):
    """Spectrogram from a magnitude grid and a phase array of the same shape."""
    phase = np.asarray(phase, dtype=np.float64)
    if phase.shape != mag.frames.shape:
        raise GeometryError(
            f"phase shape {phase.shape} != magnitude shape {mag.frames.shape}"
        )
    return Spectrogram(
        frames=mag.frames * np.exp(1j * phase),
        frame_len=mag.frame_len,
        hop=mag.hop,
        sample_rate=mag.sample_rate,
        n_samples=mag.n_samples,
        window_id=mag.window_id,
    )


def read_wav(path, expected_rate=None):
    """Read a mono 16-bit PCM WAV file into a float64 Waveform in [-1, 1].

    Raises IngestionError for unreadable/unsupported files and
    ConfigurationError when `expected_rate` is given and does not match.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (OSError, wave.Error, EOFError) as exc:
        # wave raises EOFError (via chunk.py) on truncated headers
        raise IngestionError(f"cannot read WAV {path}: {exc}", files=[str(path)]) from exc
    if n_channels != 1 or width != 2:
        raise IngestionError(
            f"{path}: need mono 16-bit PCM, got {n_channels} ch / {8 * width} bit",
            files=[str(path)],
        )
    if expected_rate is not None and rate != expected_rate:
        raise ConfigurationError(
            f"{path}: sample rate {rate} != configured {expected_rate}"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, rate)


def write_wav(path, waveform):
    """Write a Waveform as mono 16-bit PCM, clipping to [-1, 1]."""
    scaled = np.clip(np.rint(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(scaled.tobytes())
