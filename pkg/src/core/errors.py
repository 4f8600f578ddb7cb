"""Exception hierarchy.

InvalidParameterError and its children are caller mistakes (they subclass
ValueError, so `except ValueError` keeps working). NumericalFailure and its
children mean the inputs were valid but the requested quantity does not exist or
could not be computed.
"""


class LangevinError(Exception):
    pass


class InvalidParameterError(LangevinError, ValueError):
    pass


class InvalidTargetError(InvalidParameterError):
    pass


class InvalidMetricError(InvalidParameterError):
    pass


class DegenerateCaseError(InvalidParameterError):
    pass


class NumericalFailure(LangevinError, ArithmeticError):
    pass


class NoInvariantError(NumericalFailure):
    pass


class BoundUnavailableError(NumericalFailure):
    pass


class ConvergenceError(NumericalFailure):
    pass
