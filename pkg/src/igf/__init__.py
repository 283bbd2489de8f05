"""Information gain filtration for language-model fine-tuning at desk scale."""

from .errors import IGFError, InvalidConfigError, MissingArtifactError

__all__ = ["IGFError", "InvalidConfigError", "MissingArtifactError"]
__version__ = "0.1.0"
