"""
Error types for the Latent-OFER toolkit
"""

from typing import Optional


class LatentOferError(Exception):
    """Base error; ``exit_code`` is what the CLI returns for it"""

    exit_code = 1


class ConfigError(LatentOferError):
    """Invalid or unreadable configuration"""

    exit_code = 1


class DataError(LatentOferError):
    """
    Bad input data

    Args:
        message: Human readable description
        code: Stable machine readable code (missing-file, bad-label, ...)
        row: 1-based manifest row the error refers to, if any
    """

    exit_code = 2

    def __init__(self, message: str, code: str, row: Optional[int] = None):
        super().__init__(message)
        self.code = code
        self.row = row


class ModelError(LatentOferError):
    """A pipeline stage has no trained model"""

    exit_code = 3

    def __init__(self, stage: str, message: Optional[str] = None):
        super().__init__(message or f"No trained model for stage '{stage}'")
        self.stage = stage


class DimensionMismatchError(ValueError):
    """Shapes or latent dimensions that must agree do not"""
