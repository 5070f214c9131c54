"""Error taxonomy shared across the package.

Every public operation raises one of these instead of returning NaN/Inf or
silently truncating. The CLI maps each class to a distinct exit code.
"""

from __future__ import annotations


class FlowsyncError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowsyncError):
    """Bad config file, unknown key, or unparsable value."""


class ContractError(FlowsyncError):
    """Caller violated a documented precondition (shape, range, length)."""


class ShapeError(ContractError):
    """Array dimensions do not match the declared layout."""


class GeometryError(ContractError):
    """Face geometry out of frame bounds or otherwise unrenderable."""


class NumericError(FlowsyncError):
    """A computation produced a non-finite value."""


class DataIOError(FlowsyncError):
    """File or directory missing, unwritable, or malformed on disk."""


# CLI exit codes, one per error class. 0 is success, 1 is reserved for
# unexpected crashes so scripted callers can tell them apart.
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code documented in the README."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ContractError):
        return EXIT_CONTRACT
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataIOError, OSError)):
        return EXIT_IO
    return EXIT_UNEXPECTED
