"""STFT/iSTFT, geometry checks and WAV round trips.

The STFT oracle below recomputes frames from the documented contract
(front pad of hop zeros, periodic Hann, direct O(N^2) DFT) with none of
the production code paths, so agreement is a real check and not a
tautology.
"""

import wave

import numpy as np
import pytest

from permsep.dsp import (
    MagSpectrogram,
    Spectrogram,
    Waveform,
    frame_length_for,
    hann_window,
    istft,
    magnitude_phase,
    read_wav,
    rebuild_complex,
    stft,
    write_wav,
)
from permsep.errors import ConfigurationError, GeometryError, IngestionError


def _snr_db(reference, estimate):
    noise_energy = np.sum((reference - estimate) ** 2)
    if noise_energy == 0.0:
        return np.inf
    return 10.0 * np.log10(np.sum(reference**2) / noise_energy)


def _oracle_frames(x, frame_len):
    """Direct-DFT reference framing, written independently of stft()."""
    hop = frame_len // 2
    n = x.size
    n_frames = -(-n // hop)
    padded = np.zeros((n_frames + 1) * hop)
    padded[hop : hop + n] = x
    # periodic Hann, written out rather than imported
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    k = np.arange(frame_len // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(frame_len)) / frame_len)
    out = np.empty((n_frames, frame_len // 2 + 1), dtype=np.complex128)
    for t in range(n_frames):
        seg = padded[t * hop : t * hop + frame_len] * w
        out[t] = basis @ seg
    return out


# ---------------------------------------------------------------------------
# Analysis geometry
# ---------------------------------------------------------------------------


def test_frame_length_for():
    assert frame_length_for(32.0, 8000) == 256
    assert frame_length_for(8.0, 8000) == 64
    assert frame_length_for(32.0, 16000) == 512


@pytest.mark.parametrize("bad_ms", [0.0, -4.0, 10.3, 31.9375])
def test_frame_length_rejects_non_even_sample_counts(bad_ms):
    # 31.9375 ms at 8 kHz is 255.5 samples; 10.3 ms is 82.4
    with pytest.raises(ConfigurationError):
        frame_length_for(bad_ms, 8000)


def test_stft_grid_shape():
    w = Waveform(np.random.default_rng(0).standard_normal(4000), 8000)
    spec = stft(w, 32.0)
    assert spec.frames.shape == (32, 129)  # ceil(4000/128), 256/2+1
    assert spec.frame_len == 256 and spec.hop == 128
    assert spec.n_samples == 4000

    spec8 = stft(w, 8.0)
    assert spec8.frames.shape == (125, 33)


def test_only_half_shift_supported():
    w = Waveform(np.zeros(256), 8000)
    with pytest.raises(ConfigurationError):
        stft(w, 32.0, shift_fraction=0.25)


def test_spectrogram_geometry_validation():
    # wrong bin count for the declared frame length
    with pytest.raises(GeometryError):
        Spectrogram(np.zeros((4, 100), dtype=complex), 256, 128, 8000, 512)
    # hop must be half the frame
    with pytest.raises(GeometryError):
        Spectrogram(np.zeros((4, 129), dtype=complex), 256, 64, 8000, 512)
    # frame count inconsistent with n_samples
    with pytest.raises(GeometryError):
        Spectrogram(np.zeros((4, 129), dtype=complex), 256, 128, 8000, 4000)


def test_mag_spectrogram_rejects_negative_entries():
    frames = np.ones((4, 129))
    frames[2, 7] = -1e-9
    with pytest.raises(ValueError, match="negative"):
        MagSpectrogram(frames, 256, 128, 8000, 512)


def test_hann_overlap_adds_to_one():
    w = hann_window(256)
    assert w[0] == 0.0  # periodic, not symmetric
    np.testing.assert_allclose(w[:128] + w[128:], 1.0, atol=1e-15)


# ---------------------------------------------------------------------------
# Transform correctness
# ---------------------------------------------------------------------------


def test_stft_matches_direct_dft_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(300)
    spec = stft(Waveform(x, 1000), 16.0)  # frame_len 16, hop 8
    oracle = _oracle_frames(x, 16)
    assert spec.frames.shape == oracle.shape
    np.testing.assert_allclose(spec.frames, oracle, atol=1e-12)


def test_stft_is_linear():
    rng = np.random.default_rng(3)
    x = Waveform(rng.standard_normal(1000), 8000)
    y = Waveform(rng.standard_normal(1000), 8000)
    combo = Waveform(2.0 * x.samples - 0.5 * y.samples, 8000)
    lhs = stft(combo, 32.0).frames
    rhs = 2.0 * stft(x, 32.0).frames - 0.5 * stft(y, 32.0).frames
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_frame_energy_matches_parseval():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(512)
    spec = stft(Waveform(x, 8000), 32.0)
    # Rebuild the padded windowed segment for a middle frame and compare
    # time-domain energy with the rfft bin energies (interior bins count
    # twice because of conjugate symmetry).
    t = 2
    padded = np.zeros((spec.n_frames + 1) * spec.hop)
    padded[spec.hop : spec.hop + x.size] = x
    seg = padded[t * spec.hop : t * spec.hop + spec.frame_len] * hann_window(256)
    mags = np.abs(spec.frames[t]) ** 2
    freq_energy = (mags[0] + mags[-1] + 2.0 * mags[1:-1].sum()) / spec.frame_len
    assert freq_energy == pytest.approx(np.sum(seg**2), rel=1e-12)


@pytest.mark.parametrize("n", [1, 7, 127, 128, 129, 256, 1000, 4000])
def test_round_trip_snr(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    w = Waveform(x, 8000)
    back = istft(stft(w, 32.0))
    assert len(back) == n
    assert back.sample_rate == 8000
    assert _snr_db(x, back.samples) >= 60.0


def test_round_trip_snr_small_frames():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(2000)
    back = istft(stft(Waveform(x, 8000), 8.0))
    assert _snr_db(x, back.samples) >= 60.0


def test_empty_waveform_round_trip():
    w = Waveform(np.zeros(0), 8000)
    spec = stft(w, 32.0)
    assert spec.n_frames == 0
    assert len(istft(spec)) == 0


def test_zero_spectrogram_gives_silence():
    spec = Spectrogram(np.zeros((5, 129), dtype=complex), 256, 128, 8000, 640)
    out = istft(spec)
    assert len(out) == 640
    assert np.all(out.samples == 0.0)


def test_magnitude_phase_round_trip():
    rng = np.random.default_rng(2)
    x = Waveform(rng.standard_normal(2048), 8000)
    spec = stft(x, 32.0)
    mag, phase = magnitude_phase(spec)
    assert isinstance(mag, MagSpectrogram)
    assert np.all(mag.frames >= 0)
    rebuilt = rebuild_complex(mag, phase)
    np.testing.assert_allclose(rebuilt.frames, spec.frames, atol=1e-12)


def test_rebuild_complex_rejects_mismatched_phase():
    spec = stft(Waveform(np.ones(512), 8000), 32.0)
    mag, phase = magnitude_phase(spec)
    with pytest.raises(GeometryError):
        rebuild_complex(mag, phase[:-1])


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    x = np.clip(rng.standard_normal(800) * 0.3, -1.0, 1.0)
    path = tmp_path / "x.wav"
    write_wav(path, Waveform(x, 8000))
    back = read_wav(path)
    assert back.sample_rate == 8000
    assert len(back) == 800
    # 16-bit quantization step is 1/32767
    assert np.max(np.abs(back.samples - x)) <= 0.51 / 32767


def test_read_wav_checks_expected_rate(tmp_path):
    path = tmp_path / "x.wav"
    write_wav(path, Waveform(np.zeros(100), 16000))
    read_wav(path, expected_rate=16000)
    with pytest.raises(ConfigurationError):
        read_wav(path, expected_rate=8000)


def test_read_wav_rejects_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(np.zeros(400, dtype=np.int16).tobytes())
    with pytest.raises(IngestionError):
        read_wav(path)


def test_read_wav_rejects_garbage(tmp_path):
    path = tmp_path / "not_audio.wav"
    path.write_bytes(b"this is not a RIFF file")
    with pytest.raises(IngestionError):
        read_wav(path)
    # short enough that wave hits EOF before it can complain about RIFF
    truncated = tmp_path / "truncated.wav"
    truncated.write_bytes(b"RIFF")
    with pytest.raises(IngestionError):
        read_wav(truncated)


def test_waveform_rejects_non_finite():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), 8000)
