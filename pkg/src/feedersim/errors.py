"""Exception types shared across the package.

The CLI maps these onto exit codes: input/validation problems (SchemaError
and friends) exit with 2, simulation failures (PowerFlowError) with 3.
"""


class FeederSimError(Exception):
    """Base class for all package errors."""


class SchemaError(FeederSimError):
    """An input file does not match its documented schema."""


class TopologyError(SchemaError):
    """Feeder graph violates radiality or reference integrity."""


class SizingError(FeederSimError):
    """The populator could not reach the requested peak-load band."""


class CapacityError(FeederSimError):
    """An air conditioner cannot hold its deadband at the given conditions."""


class ScalingError(FeederSimError):
    """A regulation signal cannot be scaled (e.g. identically zero)."""


class PowerFlowError(FeederSimError):
    """Power-flow model or solver failure."""


class ConvergenceError(PowerFlowError):
    """Solver did not converge within the iteration limit."""

    def __init__(self, message, worst_bus=None, mismatch_pu=None):
        super().__init__(message)
        self.worst_bus = worst_bus
        self.mismatch_pu = mismatch_pu
