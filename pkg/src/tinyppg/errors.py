"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError and ParseError exit 1,
ConfigError exits 2.
"""


class TinyPPGError(Exception):
    """Base class for package errors."""


class ConfigError(TinyPPGError, ValueError):
    """Invalid configuration value (bad ratio, Nyquist violation, ...)."""


class InputError(TinyPPGError, ValueError):
    """Invalid runtime input (missing file, empty batch, too-short recording)."""


class ShapeError(TinyPPGError, ValueError):
    """Array shape does not match what a layer or model expects."""


class ParseError(TinyPPGError, ValueError):
    """Malformed binary file. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(TinyPPGError, RuntimeError):
    """Operation requires model state that is absent (e.g. projection head)."""


class TrainingDiverged(TinyPPGError, RuntimeError):
    """Training produced a non-finite loss; names the offending step."""
