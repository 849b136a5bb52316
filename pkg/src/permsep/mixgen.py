"""Two-talker mixture construction and dataset generation.

Mixtures are built at a requested signal-to-interference ratio: the
interferer is rescaled so 10*log10(P_target / P_interferer) equals the
request exactly, both scaled sources are materialized first, and the
mixture is formed as their literal sum, so `mixture == sources[0] +
sources[1]` holds bit for bit. If the mixture peak exceeds 1, all three
signals get one joint scale factor (SIR is unchanged by that).

Source material is either a WAV corpus (speaker id = parent directory
name, or the stem prefix before "_" for flat layouts) or the built-in
deterministic synthetic speakers: harmonic stacks whose fundamental
lives in a per-speaker band (disjoint across ids by construction, drift
smaller than the band gap), with speaker-dependent rolloff and formant
so spectral centroids separate, syllable-rate amplitude modulation, and
genuine pauses for the activity detector to remove.
"""

import json
import re
import warnings
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .errors import ConfigurationError, DegenerateSourceError, GeometryError, IngestionError
from .seeding import derive_seed, rng_for

MANIFEST_VERSION = 1
_POWER_FLOOR = 1e-30

# Synthetic speaker voice bands: fundamentals at 85 Hz * 1.068^band for
# band 0..23 (~85-380 Hz). Adjacent bands are 6.8% apart while the
# within-utterance drift is +/-2.5%, so ranges never overlap.
_N_BANDS = 24
_F0_BASE = 85.0
_F0_STEP = 1.068
_F0_DRIFT = 0.025


def speech_activity_trim(waveform, frame_ms=32.0, hop_ms=16.0, threshold_db=-40.0):
    """Drop silent stretches, keeping hop-sized chunks near active frames.

    Frame RMS is measured on `frame_ms` windows every `hop_ms`; a frame
    is active when its RMS is within `threshold_db` of the loudest
    frame. A hop chunk survives iff at least one frame covering it is
    active, so removal is quantized to the hop. Fully silent input
    returns an empty waveform and warns rather than raising.
    """
    n = len(waveform)
    sr = waveform.sample_rate
    frame = int(round(frame_ms * sr / 1000.0))
    hop = int(round(hop_ms * sr / 1000.0))
    if frame <= 0 or hop <= 0 or frame % hop != 0:
        raise ConfigurationError(
            f"frame_ms={frame_ms}, hop_ms={hop_ms}: frame must be a positive "
            "multiple of hop"
        )
    if n == 0:
        warnings.warn("activity trim on empty waveform", RuntimeWarning)
        return Waveform(np.zeros(0), sr)
    n_chunks = -(-n // hop)
    rms = np.empty(n_chunks)
    for j in range(n_chunks):
        seg = waveform.samples[j * hop : j * hop + frame]
        rms[j] = np.sqrt(np.mean(seg * seg))
    peak = rms.max()
    if peak <= 0.0:
        warnings.warn("fully silent waveform, nothing to keep", RuntimeWarning)
        return Waveform(np.zeros(0), sr)
    active = rms >= peak * 10.0 ** (threshold_db / 20.0)
    span = frame // hop  # frames whose window covers a given chunk
    keep = np.zeros(n_chunks, dtype=bool)
    for j in np.nonzero(active)[0]:
        keep[j : j + span] = True
    keep = keep[:n_chunks]
    pieces = [
        waveform.samples[k * hop : min((k + 1) * hop, n)]
        for k in range(n_chunks)
        if keep[k]
    ]
    if not pieces:
        warnings.warn("no active frames above threshold", RuntimeWarning)
        return Waveform(np.zeros(0), sr)
    return Waveform(np.concatenate(pieces), sr)


@dataclass
class MixtureExample:
    """One mixture with its ground-truth scaled sources."""

    mixture: Waveform
    sources: tuple
    requested_sir_db: float
    speaker_ids: tuple
    seed: int


def mix_pair(target, interferer, sir_db, speaker_ids=("a", "b"), seed=0):
    """Mix two utterances at an exact SIR.

    Both signals are truncated to the shorter length; the interferer is
    scaled by g = sqrt(P_t / (P_i * 10^(sir/10))). A zero-power source
    (after truncation) raises DegenerateSourceError.
    """
    if target.sample_rate != interferer.sample_rate:
        raise GeometryError(
            f"sample rates differ: {target.sample_rate} vs {interferer.sample_rate}"
        )
    if not np.isfinite(sir_db):
        raise ValueError(f"sir_db must be finite, got {sir_db}")
    n = min(len(target), len(interferer))
    if n == 0:
        raise DegenerateSourceError("empty source after truncation")
    s0 = target.samples[:n].copy()
    s1 = interferer.samples[:n].copy()
    p0 = float(np.mean(s0 * s0))
    p1 = float(np.mean(s1 * s1))
    if p0 < _POWER_FLOOR or p1 < _POWER_FLOOR:
        raise DegenerateSourceError(
            f"zero-power source (P_target={p0:.3e}, P_interferer={p1:.3e})"
        )
    s1 *= np.sqrt(p0 / (p1 * 10.0 ** (sir_db / 10.0)))
    mixture = s0 + s1
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        # Margin swallows the re-summation rounding so the peak stays <= 1.
        k = (1.0 - 1e-12) / peak
        s0 *= k
        s1 *= k
        mixture = s0 + s1
    sr = target.sample_rate
    return MixtureExample(
        mixture=Waveform(mixture, sr),
        sources=(Waveform(s0, sr), Waveform(s1, sr)),
        requested_sir_db=float(sir_db),
        speaker_ids=tuple(speaker_ids),
        seed=int(seed),
    )


def _speaker_band(speaker_id):
    m = re.search(r"(\d+)$", str(speaker_id))
    if m:
        idx = int(m.group(1))
    else:
        idx = int.from_bytes(sha256(str(speaker_id).encode()).digest()[:4], "little")
    # Stride 7 (coprime with 24) so consecutively numbered speakers are
    # spread across the voice range instead of packed into one corner.
    return (idx * 7) % _N_BANDS


def synth_speaker(speaker_id, duration_s, seed, sample_rate=8000):
    """Deterministic synthetic utterance for one speaker.

    The voice (fundamental band, harmonic rolloff, formant bump) is a
    function of speaker_id alone; the utterance (pitch drift, harmonic
    phases, modulation, pause placement) is a function of
    (speaker_id, seed). Output peak is normalized to 0.6.
    """
    if duration_s <= 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    n = int(round(duration_s * sample_rate))
    band = _speaker_band(speaker_id)
    f0 = _F0_BASE * _F0_STEP**band
    # Rolloff flattens and the formant rises with the band so that f0,
    # harmonic tilt and formant all push the spectral centroid the same
    # way: distinct bands give distinct centroids by construction.
    rolloff = 1.6 - 0.5 * band / (_N_BANDS - 1)
    formant = 500.0 + 1800.0 * band / (_N_BANDS - 1)
    rng = rng_for("synth", str(speaker_id), seed)
    t = np.arange(n) / sample_rate

    drift_freqs = rng.uniform(0.3, 2.5, 2)
    drift_phases = rng.uniform(0.0, 2.0 * np.pi, 2)
    drift = 0.5 * (
        np.sin(2.0 * np.pi * drift_freqs[0] * t + drift_phases[0])
        + np.sin(2.0 * np.pi * drift_freqs[1] * t + drift_phases[1])
    )
    phase = 2.0 * np.pi * np.cumsum(f0 * (1.0 + _F0_DRIFT * drift)) / sample_rate

    n_harm = max(1, min(24, int(0.45 * sample_rate / (f0 * (1.0 + _F0_DRIFT)))))
    harm_phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    sig = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = k ** (-rolloff) * (1.0 + 2.0 * np.exp(-0.5 * ((k * f0 - formant) / 350.0) ** 2))
        sig += amp * np.sin(k * phase + harm_phases[k - 1])

    am_rate = rng.uniform(2.0, 5.0)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * am_rate * t + am_phase)

    gate = np.ones(n)
    for _ in range(int(duration_s / 0.7)):
        center = rng.uniform(0.1, 0.9) * duration_s
        width = rng.uniform(0.06, 0.15)
        gate *= 1.0 - 0.985 * np.exp(-0.5 * ((t - center) / (width / 2.0)) ** 2)

    y = sig * env * gate
    y *= 0.6 / np.max(np.abs(y))
    return Waveform(y, sample_rate)


@dataclass
class ManifestEntry:
    """Paths are relative to the manifest's directory."""

    example_id: str
    mixture_path: str
    source_paths: tuple
    requested_sir_db: float
    speaker_ids: tuple
    seed: int

    def to_dict(self):
        return {
            "example_id": self.example_id,
            "mixture_path": self.mixture_path,
            "source_paths": list(self.source_paths),
            "requested_sir_db": self.requested_sir_db,
            "speaker_ids": list(self.speaker_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            example_id=d["example_id"],
            mixture_path=d["mixture_path"],
            source_paths=tuple(d["source_paths"]),
            requested_sir_db=float(d["requested_sir_db"]),
            speaker_ids=tuple(d["speaker_ids"]),
            seed=int(d["seed"]),
        )


@dataclass
class DatasetManifest:
    """Index of a generated dataset: per-split examples plus provenance.

    `root` is filled in when the manifest is loaded from (or saved to)
    disk and is not serialized.
    """

    splits: dict
    global_seed: int
    sample_rate: int
    root: Path = field(default=None, compare=False)

    def __post_init__(self):
        for split in self.splits:
            if split not in ("train", "dev", "test"):
                raise ConfigurationError(f"unknown split {split!r}")
        test_speakers = self.split_speakers("test")
        seen = self.split_speakers("train") | self.split_speakers("dev")
        overlap = test_speakers & seen
        if overlap:
            raise ConfigurationError(
                f"test speakers leak into train/dev: {sorted(overlap)}"
            )

    def split_speakers(self, split):
        ids = set()
        for entry in self.splits.get(split, []):
            ids.update(entry.speaker_ids)
        return ids

    def resolve(self, rel_path):
        if self.root is None:
            raise ConfigurationError("manifest has no root directory; load it from disk")
        return Path(self.root) / rel_path

    def save(self, path):
        path = Path(path)
        payload = {
            "format_version": MANIFEST_VERSION,
            "global_seed": self.global_seed,
            "sample_rate": self.sample_rate,
            "splits": {
                split: [e.to_dict() for e in entries]
                for split, entries in self.splits.items()
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
        self.root = path.parent

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestionError(f"cannot read manifest {path}: {exc}", files=[str(path)]) from exc
        if payload.get("format_version") != MANIFEST_VERSION:
            raise IngestionError(f"manifest version {payload.get('format_version')!r} unsupported")
        manifest = cls(
            splits={
                split: [ManifestEntry.from_dict(d) for d in entries]
                for split, entries in payload["splits"].items()
            },
            global_seed=int(payload["global_seed"]),
            sample_rate=int(payload["sample_rate"]),
            root=path.parent,
        )
        missing = []
        for entries in manifest.splits.values():
            for e in entries:
                for rel in (e.mixture_path, *e.source_paths):
                    if not manifest.resolve(rel).is_file():
                        missing.append(rel)
        if missing:
            raise IngestionError("manifest references missing files", files=missing)
        return manifest


@dataclass
class DatasetConfig:
    out_dir: str
    counts: dict
    sir_range: tuple = (0.0, 5.0)
    sample_rate: int = 8000
    duration_s: float = 2.0
    seed: int = 0
    corpus_dir: str = None
    n_train_speakers: int = 8
    n_test_speakers: int = 4
    min_utterance_s: float = 0.5

    def __post_init__(self):
        for split in ("train", "dev", "test"):
            if split not in self.counts:
                raise ConfigurationError(f"counts missing split {split!r}")
            if int(self.counts[split]) < 0:
                raise ConfigurationError(f"counts[{split!r}] must be >= 0")
        lo, hi = self.sir_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ConfigurationError(f"bad sir_range {self.sir_range}")
        if self.n_train_speakers < 2 or self.n_test_speakers < 2:
            raise ConfigurationError("need at least 2 speakers per pool")


def _ingest_corpus(corpus_dir, sample_rate):
    """Map speaker id -> sorted wav paths, or raise IngestionError."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise IngestionError(f"corpus directory {root} not found", files=[str(root)])
    speakers = {}
    for f in sorted(root.rglob("*.wav")):
        spk = f.parent.name if f.parent != root else f.stem.split("_")[0]
        speakers.setdefault(spk, []).append(f)
    if not speakers:
        raise IngestionError(f"no .wav files under {root}", files=[str(root)])
    return speakers


def _synthetic_utterance(speaker_id, ex_seed, slot, attempt, duration_s, sample_rate, rng):
    dur = duration_s * rng.uniform(0.9, 1.1)
    return synth_speaker(
        speaker_id,
        dur,
        seed=derive_seed(ex_seed, "utt", slot, attempt),
        sample_rate=sample_rate,
    )


def build_dataset(cfg):
    """Generate WAVs plus a manifest under cfg.out_dir.

    Every example is seeded from (cfg.seed, running example index), so
    regenerating with the same config is byte-identical. Test-split
    speakers are disjoint from train/dev by construction (synthetic) or
    by a seeded speaker partition (corpus).
    """
    out = Path(cfg.out_dir)
    corpus = None
    if cfg.corpus_dir is not None:
        corpus = _ingest_corpus(cfg.corpus_dir, cfg.sample_rate)
        names = sorted(corpus)
        if len(names) < 4:
            raise ConfigurationError(
                f"corpus has {len(names)} speakers; need >= 4 for disjoint pools"
            )
        order = rng_for(cfg.seed, "speaker_split").permutation(len(names))
        n_test = min(max(2, cfg.n_test_speakers), len(names) - 2)
        test_speakers = [names[i] for i in order[:n_test]]
        train_speakers = [names[i] for i in order[n_test:]]
    else:
        train_speakers = [f"spk{i:03d}" for i in range(cfg.n_train_speakers)]
        test_speakers = [
            f"spk{i:03d}"
            for i in range(cfg.n_train_speakers, cfg.n_train_speakers + cfg.n_test_speakers)
        ]

    min_len = int(cfg.min_utterance_s * cfg.sample_rate)
    splits = {}
    global_idx = 0
    for split in ("train", "dev", "test"):
        pool = test_speakers if split == "test" else train_speakers
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for _ in range(int(cfg.counts[split])):
            ex_seed = derive_seed(cfg.seed, "example", global_idx)
            rng = np.random.default_rng(ex_seed)
            pair = rng.choice(len(pool), size=2, replace=False)
            ids = (pool[pair[0]], pool[pair[1]])
            sir = float(rng.uniform(*cfg.sir_range))
            utts = []
            for slot, spk in enumerate(ids):
                for attempt in range(20):
                    if corpus is None:
                        utt = _synthetic_utterance(
                            spk, ex_seed, slot, attempt, cfg.duration_s, cfg.sample_rate, rng
                        )
                    else:
                        files = corpus[spk]
                        utt = read_wav(
                            files[int(rng.integers(len(files)))],
                            expected_rate=cfg.sample_rate,
                        )
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        utt = speech_activity_trim(utt)
                    if len(utt) >= min_len:
                        break
                else:
                    raise DegenerateSourceError(
                        f"speaker {spk}: no utterance of >= {cfg.min_utterance_s}s "
                        "after 20 attempts"
                    )
                utts.append(utt)
            example = mix_pair(utts[0], utts[1], sir, speaker_ids=ids, seed=ex_seed)
            stem = f"ex{global_idx:05d}"
            rels = {
                "mix": f"{split}/{stem}_mix.wav",
                "s0": f"{split}/{stem}_s0.wav",
                "s1": f"{split}/{stem}_s1.wav",
            }
            write_wav(out / rels["mix"], example.mixture)
            write_wav(out / rels["s0"], example.sources[0])
            write_wav(out / rels["s1"], example.sources[1])
            entries.append(
                ManifestEntry(
                    example_id=stem,
                    mixture_path=rels["mix"],
                    source_paths=(rels["s0"], rels["s1"]),
                    requested_sir_db=sir,
                    speaker_ids=ids,
                    seed=ex_seed,
                )
            )
            global_idx += 1
        splits[split] = entries

    manifest = DatasetManifest(
        splits=splits, global_seed=cfg.seed, sample_rate=cfg.sample_rate
    )
    manifest.save(out / "manifest.json")
    return manifest
