"""Exception hierarchy shared by every exitlab module.

The CLI maps these onto process exit codes, so each leaf class carries the
status it should produce.
"""


class ExitlabError(Exception):
    exit_code = 1


class ConfigError(ExitlabError, ValueError):
    exit_code = 2


class DimensionError(ExitlabError, ValueError):
    """Tensor extents do not match what a layer or format expects."""

    exit_code = 2


class ArtifactError(ExitlabError):
    """A referenced file is missing, unreadable, or already exists."""

    exit_code = 3


class FormatError(ArtifactError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class FrameCountError(FormatError):
    pass


class DivergenceError(ExitlabError, FloatingPointError):
    exit_code = 4


class EpisodeError(ExitlabError, RuntimeError):
    """Illegal use of the episode machinery (e.g. stepping a finished episode)."""


class StaleBatchError(ExitlabError, RuntimeError):
    """A PPO batch was collected under a different parameter version."""
