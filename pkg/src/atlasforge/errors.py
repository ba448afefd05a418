"""Exception hierarchy shared by every atlasforge module."""


class AtlasError(Exception):
    """Base class for all atlasforge errors."""


class InvalidInput(AtlasError, ValueError):
    pass


class DegenerateInput(AtlasError, ValueError):
    pass


class UsageError(AtlasError, RuntimeError):
    pass


class StateError(AtlasError, RuntimeError):
    pass


class NumericalError(AtlasError, ArithmeticError):
    pass


class DegenerateField(AtlasError, RuntimeError):
    """The non-traditional classifier is (numerically) zero everywhere."""


class EmptyDomain(AtlasError, RuntimeError):
    """No occupied UV sample or triangle survived extraction."""
