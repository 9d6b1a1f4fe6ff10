"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A model or configuration parameter violates its constraints."""


class CapacityError(RuntimeError):
    """A construction exceeded its node or enumeration budget.

    ``partial_size`` carries how far the construction got before stopping.
    """

    def __init__(self, message, partial_size=None):
        super().__init__(message)
        self.partial_size = partial_size


class StructureError(ValueError):
    """The input structure is not what the operation requires (e.g. not a tree)."""


class ConfigError(ParameterError):
    """An experiment config fails schema or semantic validation."""
