"""Exception hierarchy shared by the solver, the oracles and the CLI."""


class CarouselError(Exception):
    """Base class for all package errors."""


class InvalidDistributionError(CarouselError, ValueError):
    """A pick-time distribution violates its construction invariants."""


class FitError(CarouselError, ValueError):
    """A moment target cannot be matched by the requested family."""


class SolverError(CarouselError, RuntimeError):
    """Numerical failure inside one of the solvers."""


class UnsupportedMethodError(SolverError):
    """The requested solver has no branch for this distribution."""


class RootFindingError(SolverError):
    pass


class MultipleRootError(SolverError):
    """A zero of multiplicity three or higher was found."""


class SingularSystemError(SolverError):
    pass


class AnalyticityError(SolverError):
    """The transform numerator does not vanish at a zero of the denominator."""


class PrecisionLossError(SolverError):
    """Cancellation used up the working precision."""


class NormalizationError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass
