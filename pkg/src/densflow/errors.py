"""Exception types shared across densflow.

Everything that signals bad *data* (as opposed to a programming error) derives
from :class:`DataError`; the command-line tool maps those to exit status 2.
"""

from __future__ import annotations


class DensflowError(Exception):
    pass


class DataError(DensflowError, ValueError):
    pass


class ShapeMismatch(DataError):
    pass


class OverlappingRuns(DataError):
    pass


class OffsetOutOfBounds(DataError):
    pass


class EmptyInstance(DataError):
    pass


class ThresholdOutOfRange(DensflowError, ValueError):
    pass


class MissingPair(DataError):
    pass


class InfeasibleSpec(DataError):
    pass


class BadMagic(DataError):
    pass


class DimsMismatch(DataError):
    pass


class NonFiniteField(DataError):
    pass


class IoFailure(DensflowError, OSError):
    pass
