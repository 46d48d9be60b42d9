"""Exception hierarchy shared across the package."""


class PrevmapError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(PrevmapError):
    """Input data or configuration failed validation."""


class MissingColumnError(ValidationError):
    pass


class NonNumericCellError(ValidationError):
    pass


class InvalidCountError(ValidationError):
    pass


class PoleProximityError(ValidationError):
    pass


class AgeOrderError(ValidationError):
    pass


class InvalidParamError(ValidationError):
    """A correlation/variance parameter is outside its admissible range."""


class NumericalError(PrevmapError):
    """A numerical routine failed to produce a usable result."""


class NotPositiveDefiniteError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    """Logistic fit diverged (some fitted probabilities are 0 or 1)."""


class OptimFailedError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    """Importance weights collapsed onto too few Monte Carlo samples."""


class SingularHessianError(NumericalError):
    pass


class EmptyBinsError(ValidationError):
    pass


class SketchOnlyError(PrevmapError):
    """The requested summary needs joint draws, but only sketches were kept."""


class GridMismatchError(ValidationError):
    pass


class ModeMismatchError(ValidationError):
    pass
