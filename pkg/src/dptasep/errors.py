"""Exception hierarchy shared across the package."""


class DptasepError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(DptasepError):
    """A configuration or argument failed validation."""


class StateSpaceOverflow(DptasepError):
    """Exact forward evolution exceeded its state cap."""


class RootNearBoundary(DptasepError):
    """A spectral root fell inside the guard band of the classification line."""


class ClassificationCountMismatch(DptasepError):
    """Left/right root counts differ from the expected split."""


class IllConditioned(DptasepError):
    """A determinant ratio was requested from a matrix too ill-conditioned to trust."""


class EnergyVanishes(DptasepError):
    """The initial-condition energy functional vanished where a division needs it."""


class PoleProximity(DptasepError):
    """Evaluation point too close to a pole of the rational weight."""


class QuadratureDiverged(DptasepError):
    """Node doubling did not converge within the allowed budget."""


class SingularAssembly(DptasepError):
    """Two kernel points coincide; a (w - w') denominator underflowed."""


class BudgetExceeded(DptasepError):
    """A combinatorial evaluation exceeded its configured budget."""


class NotFlatCompatible(DptasepError):
    """A flat initial condition requires the particle count to divide the period."""


class ConvergenceConditionViolated(DptasepError):
    """A summation identity was requested outside its convergence region."""


class DegenerateRatio(DptasepError):
    """A partial product of spectral ratios is too close to one."""


class DomainExceeded(DptasepError):
    """Argument outside the certified domain of a special function."""


class BranchAmbiguity(DptasepError):
    """A limiting root landed too close to the classification axis."""


class TruncationNotConverged(DptasepError):
    """Increasing a truncation cutoff still changes the result too much."""


class CoincidentParameters(DptasepError):
    """Two contour parameters that must differ coincide."""


class ContourCollision(DptasepError):
    """Two discretized contours come closer than the safety margin."""


class ConstraintViolated(DptasepError):
    """A structural precondition (for example a period bound) does not hold."""


class OutOfRangeIndex(DptasepError):
    """A scaled observation index left its admissible range."""
