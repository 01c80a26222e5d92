"""Exception types shared across the package."""


class L2CError(Exception):
    """Base class for all package errors."""


class DimensionError(L2CError):
    """Shape disagreement between operands.

    Message always lists expected vs. actual so callers can log it verbatim.
    """

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteError(L2CError):
    """A NaN or Inf was found where a finite value is required."""


class ValidationError(L2CError):
    """A precondition on values (not shapes) was violated."""


class CacheDroppedError(L2CError):
    """The K-V domain cache was read after the drop point."""


class StoreError(L2CError):
    """Base class for serialization errors."""


class MissingFileError(StoreError):
    pass


class ShapeMismatchError(StoreError):
    pass


class VersionError(StoreError):
    pass


class MissingBlobError(StoreError):
    pass
