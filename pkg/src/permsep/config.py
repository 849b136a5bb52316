"""Experiment configuration: YAML schema, strict validation, hashing.

A config file has sections data/features/model/train/eval/io plus a
top-level seed. Every key has a default; unknown keys anywhere are
rejected so a typo cannot silently fall back to a default.

`config_hash` fingerprints everything that affects numerics; the io
section (output paths) is excluded. The hash is embedded in logs,
reports, and checkpoints, and aggregation steps refuse to combine
results whose hashes disagree with what they expect.
"""

import hashlib
import json
from dataclasses import dataclass

import yaml

from .errors import ConfigurationError
from .mixgen import DatasetConfig
from .trainer import TrainConfig


def _is_bool(v):
    return type(v) is bool


def _is_int(v):
    return type(v) is int


def _is_number(v):
    return type(v) in (int, float)


def _is_str(v):
    return isinstance(v, str)


# name -> (checker, default, description of the accepted values)
_SCHEMA = {
    "data": {
        "train": (_is_int, 140, "int >= 0"),
        "dev": (_is_int, 30, "int >= 0"),
        "test": (_is_int, 30, "int >= 0"),
        "sir_low": (_is_number, 0.0, "number"),
        "sir_high": (_is_number, 5.0, "number"),
        "sample_rate": (_is_int, 8000, "int > 0"),
        "duration_s": (_is_number, 2.0, "number > 0"),
        "source": (_is_str, "synthetic", '"synthetic" or a corpus directory'),
        "train_speakers": (_is_int, 8, "int >= 2"),
        "test_speakers": (_is_int, 4, "int >= 2"),
        "min_utterance_s": (_is_number, 0.5, "number > 0"),
    },
    "features": {
        "frame_ms": (_is_number, 32.0, "number > 0"),
        "shift_fraction": (_is_number, 0.5, "0.5"),
    },
    "model": {
        "hidden": (_is_int, 128, "int >= 1"),
        "sources": (_is_int, 2, "int in 1..8"),
        "softmax_after_recurrent": (_is_bool, True, "bool"),
        "dropout": (_is_number, 0.2, "number in [0, 1)"),
    },
    "train": {
        "epochs": (_is_int, 50, "int >= 1"),
        "learning_rate": (_is_number, 0.0005, "number > 0"),
        "lr_decay_factor": (_is_number, 0.7, "number in (0, 1]"),
        "cv_improvement_threshold": (_is_number, 0.003, "number >= 0"),
        "loss_mode": (_is_str, "pit", "pit | softmin_const | softmin_trainable"),
        "gamma_init": (_is_number, 0.0, "number >= 0"),
        "reduction": (_is_str, "sum", "sum | mean"),
        "normalization": (_is_str, "paper_eq17", "paper_eq17 | none"),
    },
    "eval": {
        "masks": (_is_str, "model", "model | oracle"),
        "split": (_is_str, "test", "train | dev | test"),
    },
    "io": {
        "out_dir": (_is_str, "runs/default", "directory path"),
    },
}


def _validate_section(name, schema, given):
    if not isinstance(given, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) in {name!r}: {sorted(unknown)}"
        )
    out = {}
    for key, (checker, default, expected) in schema.items():
        value = given.get(key, default)
        if not checker(value):
            raise ConfigurationError(
                f"{name}.{key}: expected {expected}, got {value!r}"
            )
        if checker is _is_number:
            value = float(value)
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    data: dict
    features: dict
    model: dict
    train: dict
    eval: dict
    io: dict
    seed: int

    def to_dict(self):
        return {
            "data": dict(self.data),
            "features": dict(self.features),
            "model": dict(self.model),
            "train": dict(self.train),
            "eval": dict(self.eval),
            "io": dict(self.io),
            "seed": self.seed,
        }

    def with_updates(self, updates):
        """Copy with dotted-path overrides, e.g. {"train.gamma_init": 2.0}."""
        raw = self.to_dict()
        for path, value in updates.items():
            parts = path.split(".")
            node = raw
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node and path != "seed":
                raise ConfigurationError(f"unknown config path {path!r}")
            node[parts[-1]] = value
        return validate_config(raw)

    def dataset_config(self, out_dir):
        d = self.data
        return DatasetConfig(
            out_dir=str(out_dir),
            counts={"train": d["train"], "dev": d["dev"], "test": d["test"]},
            sir_range=(d["sir_low"], d["sir_high"]),
            sample_rate=d["sample_rate"],
            duration_s=d["duration_s"],
            seed=self.seed,
            corpus_dir=None if d["source"] == "synthetic" else d["source"],
            n_train_speakers=d["train_speakers"],
            n_test_speakers=d["test_speakers"],
            min_utterance_s=d["min_utterance_s"],
        )

    def train_config(self):
        t = self.train
        return TrainConfig(
            epochs=t["epochs"],
            learning_rate=t["learning_rate"],
            lr_decay_factor=t["lr_decay_factor"],
            cv_improvement_threshold=t["cv_improvement_threshold"],
            loss_mode=t["loss_mode"],
            gamma_init=t["gamma_init"],
            reduction=t["reduction"],
            normalization=t["normalization"],
            seed=self.seed,
        )


def validate_config(raw):
    """Validate a raw mapping against the schema; fill in defaults."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    known = set(_SCHEMA) | {"seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not _is_int(seed) or seed < 0:
        raise ConfigurationError(f"seed: expected int >= 0, got {seed!r}")
    sections = {
        name: _validate_section(name, schema, raw.get(name, {}))
        for name, schema in _SCHEMA.items()
    }
    cfg = ExperimentConfig(seed=seed, **sections)

    # Cross-field checks beyond per-key types.
    if cfg.data["sir_low"] > cfg.data["sir_high"]:
        raise ConfigurationError("data.sir_low must be <= data.sir_high")
    if cfg.features["shift_fraction"] != 0.5:
        raise ConfigurationError("features.shift_fraction must be 0.5")
    if not 0.0 <= cfg.model["dropout"] < 1.0:
        raise ConfigurationError("model.dropout must be in [0, 1)")
    if not 1 <= cfg.model["sources"] <= 8:
        raise ConfigurationError("model.sources must be in 1..8")
    if cfg.eval["masks"] not in ("model", "oracle"):
        raise ConfigurationError('eval.masks must be "model" or "oracle"')
    if cfg.eval["split"] not in ("train", "dev", "test"):
        raise ConfigurationError("eval.split must be train, dev, or test")
    cfg.train_config()  # range checks live in TrainConfig
    return cfg


def load_config(path):
    """Load and validate a YAML config file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return validate_config(raw)


def config_hash(cfg):
    """sha256 over everything that affects numerics (io excluded)."""
    payload = cfg.to_dict()
    del payload["io"]
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
