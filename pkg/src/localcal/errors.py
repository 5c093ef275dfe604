"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`LocalCalError`. The two
intermediate classes decide the CLI exit code: :class:`DataError` maps to 2,
:class:`NumericalError` to 3.
"""


class LocalCalError(Exception):
    pass


class DataError(LocalCalError):
    pass


class NumericalError(LocalCalError):
    pass


# dataset / file formats
class MagicMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class RejectedEmptyDataset(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class FractionSumInvalid(DataError):
    pass


class IoFailure(DataError):
    pass


class ClassCountMismatch(DataError):
    pass


class SpecInvalid(DataError):
    pass


# numerics
class NonFiniteInput(NumericalError):
    pass


class EmptyInput(NumericalError):
    pass


class InvalidBracket(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class NoNeighbors(NumericalError):
    pass


class AllBinsEmpty(NumericalError):
    pass


class NoRetainedBins(NumericalError):
    pass


class InvalidDelta(NumericalError):
    pass


class KTooLarge(NumericalError):
    pass


class EpsilonTooLarge(NumericalError):
    pass


# warnings
class DegenerateCovariance(RuntimeWarning):
    pass


class DegenerateClass(RuntimeWarning):
    pass
