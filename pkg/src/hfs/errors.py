"""Exception hierarchy shared by every module.

Each family maps to a distinct CLI exit code (see ``hfs.cli``).
"""

from __future__ import annotations


class HFSError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


class ConfigError(HFSError, ValueError):
    exit_code = 2


class DataFormatError(HFSError, ValueError):
    exit_code = 3


class NumericError(HFSError, ArithmeticError):
    exit_code = 4


class ResultsIOError(HFSError, OSError):
    exit_code = 5


class InvariantError(HFSError, AssertionError):
    """A runtime audit (payload size, gradient tolerance, ...) failed."""

    exit_code = 6


class DimensionError(HFSError, ValueError):
    exit_code = 7


class ContractError(HFSError, ValueError):
    exit_code = 7


class DomainError(HFSError, ValueError):
    exit_code = 7


class PartitionError(HFSError, RuntimeError):
    exit_code = 3
