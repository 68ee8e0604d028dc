"""Exception types raised across the package."""


class JointFlipError(Exception):
    """Base class for all package errors."""


class NonConvergence(JointFlipError):
    """IRLS exhausted its iteration budget before the score tolerance was met."""


class SeparationDetected(JointFlipError):
    """Binomial fitted means hit the boundary and the weighted design went singular."""


class SingularDesign(JointFlipError):
    """A design or weighted cross-product matrix could not be factored."""


class DegenerateVariance(JointFlipError):
    """A flipped effective score has (numerically) zero variance."""


class TooLarge(JointFlipError):
    """Exhaustive enumeration requested beyond the memory guard."""


class TooManyHypotheses(JointFlipError):
    """Closed testing requested for a family too large to enumerate."""


class SingularCovariance(JointFlipError):
    """Covariance matrix of the flipped scores is not positive definite."""


class ParseError(JointFlipError):
    """Malformed or inconsistent input file."""
