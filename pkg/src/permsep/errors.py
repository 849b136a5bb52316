"""Exception types shared across the package."""


class PermsepError(Exception):
    """Base class for package errors."""


class ConfigurationError(PermsepError):
    """Invalid configuration value, schema violation, or disallowed mode."""


class GeometryError(PermsepError):
    """Structural mismatch: incompatible shapes, grids, or stale traces."""


class IngestionError(PermsepError):
    """Corpus files missing or unreadable.

    `files` lists the offending paths when known.
    """

    def __init__(self, message, files=()):
        super().__init__(message)
        self.files = list(files)


class DegenerateSourceError(PermsepError):
    """A source has no usable signal (zero power) where one is required."""


class NonFiniteLossError(PermsepError):
    """Training objective or gradient went NaN/inf.

    `example_id` names the utterance being processed when the abort hit.
    """

    def __init__(self, message, example_id=None):
        super().__init__(message)
        self.example_id = example_id


class UndefinedScoreError(PermsepError):
    """Evaluation metric undefined, e.g. zero-energy target source."""


class CheckpointError(PermsepError):
    """Checkpoint unreadable, wrong version, or inconsistent with the model."""
