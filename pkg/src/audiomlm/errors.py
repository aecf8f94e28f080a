"""Exception types shared across the package."""


class AudioMlmError(Exception):
    """Base class for all package errors."""


class ShapeError(AudioMlmError, ValueError):
    """Tensor dimension mismatch; message names both shapes."""


class ContractError(AudioMlmError, ValueError):
    """A documented precondition was violated (non-scalar loss, empty mask, ...)."""


class DegenerateInputError(AudioMlmError, ValueError):
    """Zero-norm vector where a direction is required."""


class AudioFormatError(AudioMlmError, ValueError):
    """Unsupported audio encoding or sample rate."""


class WavParseError(AudioFormatError):
    """Malformed RIFF/WAVE structure; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TooShortError(AudioMlmError, ValueError):
    """Clip or spectrogram too short for the requested operation."""


class InsufficientSamplesError(AudioMlmError, ValueError):
    """Fewer samples than clusters requested."""


class ConfigError(AudioMlmError, ValueError):
    """Invalid or unknown configuration key/value."""


class DataError(AudioMlmError):
    """Manifest or corpus problem."""


class NumericError(AudioMlmError):
    """Non-finite value where training cannot continue; names the parameter."""


class CheckpointError(AudioMlmError):
    """Corrupt or inconsistent checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class PlanError(AudioMlmError):
    """Iteration plan cannot proceed; names the missing stage artifact."""
