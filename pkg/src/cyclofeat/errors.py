"""Exception hierarchy shared by all cyclofeat modules."""

from __future__ import annotations


class CyclofeatError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(CyclofeatError, ValueError):
    """A parameter violates an operation's precondition."""


class MalformedInputError(CyclofeatError, ValueError):
    """A text input file (onsets, trajectories, features) could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class InsufficientDataError(CyclofeatError, ValueError):
    """Input is too short for the requested estimator."""


class UndefinedStatisticError(CyclofeatError, ValueError):
    """A statistic is undefined for the given data (e.g. Gini of all zeros)."""


class RankDeficientError(CyclofeatError, ValueError):
    """The design matrix is (numerically) rank deficient."""

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"design matrix is rank deficient at column {column!r}")


class DegenerateGroupingError(CyclofeatError, ValueError):
    """A mixed model was requested with fewer than two groups."""


class WavError(CyclofeatError):
    """Base class for WAV reading/writing failures."""


class MalformedWavError(WavError, ValueError):
    """The RIFF/WAVE structure is truncated or inconsistent."""


class UnsupportedWavError(WavError, ValueError):
    """The file is a valid WAV but uses an encoding other than 16-bit PCM."""


class WavIOError(WavError, OSError):
    """The WAV file could not be read from or written to disk."""


class JoinError(CyclofeatError, KeyError):
    """A survey clip has no feature vector to join against."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(CyclofeatError, ValueError):
    """The pipeline configuration failed validation."""
