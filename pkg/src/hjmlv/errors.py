"""Exception hierarchy shared by all pipeline stages."""


class HJMLVError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(HJMLVError, ValueError):
    """Input data is malformed (non-finite rates, missing cells, bad knots)."""


class GridAlignmentError(HJMLVError, ValueError):
    """A date or tenor does not fall on the simulation time grid."""


class NoSolutionError(HJMLVError, ValueError):
    """Implied volatility inversion has no root in the admissible range."""


class ExtrapolationError(HJMLVError, ValueError):
    """A query lies outside the quoted expiry range."""


class CalibrationError(HJMLVError):
    """The forward-volatility bootstrap is infeasible for some target."""

    def __init__(self, message, expiry=None, tenor=None):
        super().__init__(message)
        self.expiry = expiry
        self.tenor = tenor


class SmileFitError(HJMLVError):
    """A fitted variance smile is negative somewhere on its support."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class LocalVolError(HJMLVError):
    """Local variance evaluation produced a non-finite value."""


class SimulationError(HJMLVError):
    """Monte Carlo run aborted; ``completed`` counts finished paths."""

    def __init__(self, message, completed=0):
        super().__init__(message)
        self.completed = completed
