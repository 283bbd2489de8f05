"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`IGFError`
and carries a short machine-readable ``code`` that the CLI prints.
"""

from __future__ import annotations


class IGFError(Exception):
    code = "igf-error"


class InvalidConfigError(IGFError, ValueError):
    code = "invalid-config"

    def __init__(self, message: str, field_path: str | None = None):
        super().__init__(message)
        self.field_path = field_path


class InvalidTokenError(IGFError, ValueError):
    code = "invalid-token"


class CorpusTooSmallError(IGFError, ValueError):
    code = "corpus-too-small"


class NonFiniteParametersError(IGFError, FloatingPointError):
    code = "non-finite-parameters"


class NonFiniteGradientError(IGFError, FloatingPointError):
    code = "non-finite-gradient"


class TrainingDivergedError(IGFError, FloatingPointError):
    code = "training-diverged"


class IncompatibleSnapshotError(IGFError):
    code = "incompatible-snapshot"


class NonFiniteProbeError(IGFError, FloatingPointError):
    code = "non-finite-probe"


class EmptyDatasetError(IGFError):
    code = "empty-dataset"


class DegenerateDatasetError(IGFError):
    code = "degenerate-dataset"


class DatasetNotNormalizedError(IGFError):
    code = "dataset-not-normalized"


class DataLeakError(IGFError):
    code = "data-leak"


class StaleLearnerError(IGFError):
    """The learner was trained against a different base model or objective set."""

    code = "stale-learner"


class SeparationUndefinedError(IGFError, ValueError):
    code = "separation-undefined"


class MissingArtifactError(IGFError, FileNotFoundError):
    code = "missing-artifact"

    def __init__(self, message: str, artifact: str | None = None):
        super().__init__(message)
        self.artifact = artifact
