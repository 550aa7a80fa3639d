"""Exception types shared across the package."""


class DltError(Exception):
    """Base class for all dltlab errors."""


class ShapeError(DltError, ValueError):
    pass


class ContractError(DltError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(DltError, FloatingPointError):
    def __init__(self, message, layer=None, sample_id=None):
        super().__init__(message)
        self.layer = layer
        self.sample_id = sample_id


class StateError(DltError, RuntimeError):
    """Operation requested before the data it needs exists."""


class DegeneracyError(DltError, ValueError):
    pass


class ConfigError(DltError, ValueError):
    pass
