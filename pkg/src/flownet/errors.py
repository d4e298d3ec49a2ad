"""Exception hierarchy shared across the package."""


class FlownetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FlownetError, ValueError):
    """Invalid dimensions, lengths or option values."""


class DimensionError(FlownetError, ValueError):
    """Operand shapes do not line up."""


class DomainError(FlownetError, ValueError):
    """An input lies outside the domain of an operation (e.g. negative volume)."""


class NumericError(FlownetError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ContractError(FlownetError, RuntimeError):
    """An API was called out of order or with missing state."""


class UnsupportedTopologyError(FlownetError, ValueError):
    """The intersection layout is not one the phase tables support."""
