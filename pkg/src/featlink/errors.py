"""Exception hierarchy shared across the package."""


class FeatlinkError(Exception):
    """Base class for all featlink errors."""


class ConfigurationError(FeatlinkError):
    """Inconsistent dimensions, invalid parameter values, bad enum members."""


class UsageError(FeatlinkError):
    """API misuse, e.g. a backward pass with a stale or foreign cache."""


class NumericError(FeatlinkError):
    """Non-finite values where finite math is required."""


class DegenerateInputError(FeatlinkError):
    """Input admits no answer, e.g. power-normalizing an all-zero vector."""


class OutOfSupportError(FeatlinkError):
    """Quantized symbol outside the entropy model's support bound."""


class TrainingDivergedError(FeatlinkError):
    """A training loop produced a non-finite loss."""


class CheckpointError(FeatlinkError):
    """Malformed model checkpoint file."""


class FeatureFileError(FeatlinkError):
    """Malformed feature interchange file."""


class BitstreamError(FeatlinkError):
    """Malformed bitstream container."""


class ConfigParseError(FeatlinkError):
    """Experiment config text failed validation; carries every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {e}" for e in self.errors))
