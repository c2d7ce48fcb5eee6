"""Exceptions and warning categories shared across the package."""


class AuxGMMError(Exception):
    """Base class for all package-specific errors."""


class ParseError(AuxGMMError):
    """A CSV cell could not be parsed as a number."""


class MalformedRow(AuxGMMError):
    """A data row violates a dataset invariant (bad d flag, missing y, ...)."""


class InsufficientData(AuxGMMError):
    """Fewer observations than basis functions."""


class SingularDesign(AuxGMMError):
    """Least-squares design remained unsolvable at every ridge level."""


class DomainError(AuxGMMError):
    """Parameter value outside its admissible box."""


class MissingOutcome(AuxGMMError):
    """Moment evaluation requested on a record whose outcome is missing."""


class RankDeficient(AuxGMMError):
    """Jacobian has numerical column rank below the parameter dimension."""


class FitDiverged(AuxGMMError):
    """Iterative fit hit its iteration cap without meeting the gradient tolerance."""


class SingularInformation(AuxGMMError):
    """Score outer-product matrix is not positive definite."""


class SingularBread(AuxGMMError):
    """J'WJ is singular, so the sandwich variance is undefined."""


class SpecError(AuxGMMError):
    """Invalid simulation or estimator specification."""


class UnsupportedSpec(AuxGMMError):
    """Specification outside what an exact oracle can enumerate."""


class DegenerateCovariateWarning(UserWarning):
    """A covariate had (near-)zero variance; knots were de-duplicated."""


class SeparationWarning(UserWarning):
    """Binary fit showed quasi-separation; returned probabilities are clipped."""


class ShrunkBasisWarning(UserWarning):
    """Basis was automatically reduced to fit the available sample size."""


class NoConvergenceWarning(UserWarning):
    """Optimizer stopped at its iteration cap; the best point is still returned."""
