"""Exception taxonomy shared across the package.

The command line maps these onto exit codes: configuration and usage
problems exit 1, numerical failures exit 2, missing or unreadable
files exit 3.
"""

from __future__ import annotations


class SfwaveError(Exception):
    """Base class for all package errors."""


class ConfigError(SfwaveError):
    """Bad configuration: unknown key, missing field, or invalid value.

    ``path`` holds the dotted field path (``"medium.regions[2].c"``)
    when the error refers to a specific field.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(SfwaveError):
    """A numerical stage failed: singular factor, resonant frequency,
    non-convergence, or an ill-conditioned continued-fraction step."""


class InstabilityError(NumericalError):
    """Time integration blew up (norm growth beyond the detector limit)."""


class ProtocolError(SfwaveError):
    """Coupled stepping lost a face message or received a duplicate."""


class DataError(SfwaveError):
    """A data file is missing, truncated, or not in the expected format."""
