"""Exception types shared across the package."""


class EttkitError(Exception):
    """Base class for all package errors."""


class EmptyInput(EttkitError):
    """An operation received no usable rows or innings."""


class UnvisitedState(EttkitError):
    """A base-out state was never observed, so its value is undefined."""


class SeasonMismatch(EttkitError):
    """A transition was evaluated against a matrix from another season."""


class MissingCoordinates(EttkitError):
    """Spray angle requested for a ball with no landing coordinates."""


class EmptyAfterExclusion(EttkitError):
    """The exclusion cascade removed every plate appearance."""


class PositivityViolation(EttkitError):
    """A simulated unit's treatment probability left the allowed open interval."""


class OneClass(EttkitError):
    """The treatment column is constant; a propensity model cannot be fit."""


class Separation(EttkitError):
    """Logistic coefficients diverged, indicating (quasi-)separated classes."""


class SingularDesign(EttkitError):
    """Design matrix is rank deficient; names the dependent columns."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        super().__init__(message or f"linearly dependent columns: {', '.join(self.columns)}")


class ConvergenceFailure(EttkitError):
    """Iterative fit ran out of iterations without meeting tolerance."""


class ManifestMismatch(EttkitError):
    """Scoring input columns do not match the model's training manifest."""


class DegenerateWeights(EttkitError):
    """A control unit's propensity is too close to 1 for odds weighting."""


class ResampleDegenerate(EttkitError):
    """A bootstrap resample lost a treatment arm (or every usable stratum)."""


class NoVariation(EttkitError):
    """A stratum lacks variation in treatment or instrument."""


class AllStrataUnusable(EttkitError):
    """Every stratum was skipped; no instrumented estimate exists."""


class NoControlsInStratum(EttkitError):
    """An exact-match stratum holds treated units but zero controls.

    Recorded in the match report rather than raised.
    """

    def __init__(self, key):
        self.key = key
        super().__init__(f"no controls available in stratum {key!r}")
