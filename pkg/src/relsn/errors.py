"""Exception hierarchy shared by all modules."""


class RelsnError(Exception):
    """Base class for errors raised by this package."""


class DomainError(RelsnError, ValueError):
    """An argument lies outside the domain of the operation."""


class IllConditionedDesignError(RelsnError):
    """A Gram matrix is singular or too badly conditioned to solve."""


class SpecMismatchError(RelsnError, ValueError):
    """Two spline fits cannot be compared."""


class InsufficientPrefixError(DomainError):
    """The shortest trimmed prefix holds too few observations to fit."""


class InsufficientSegmentError(InsufficientPrefixError):
    """A change-point segment is too short for the trimmed prefix fits."""


class CacheMiss(RelsnError):
    """A cached pivotal table is absent or does not match the request."""


class CorruptTableError(CacheMiss):
    """A pivotal table file is truncated or fails its checksum."""
