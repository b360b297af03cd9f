"""Exception hierarchy.

Every failure the pipeline can report carries a ``detail`` message and the
process exit code the command line maps it to.
"""


class ScopError(Exception):
    exit_code = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(ScopError):
    exit_code = 1


class ConfigError(ScopError):
    pass


class ShapeError(ScopError, ValueError):
    pass


class FormatError(ScopError):
    pass


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class KnockoffError(ScopError):
    pass


class FrozenWeightError(ScopError):
    pass


class TrainingDivergedError(ScopError):
    pass


class PlanError(ScopError):
    pass


class ArtifactMissingError(ScopError):
    pass


class InvariantError(ScopError):
    pass
