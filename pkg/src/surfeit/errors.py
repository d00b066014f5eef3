"""Exception hierarchy.

Configuration problems derive from :class:`ConfigError` and map to CLI exit
code 2; everything else derived from :class:`NumericalFailure` maps to 1.
"""


class SurfeitError(Exception):
    """Base class for all package errors."""


class ConfigError(SurfeitError):
    """Invalid user input (unknown family, bad parameters, malformed config)."""


class NumericalFailure(SurfeitError):
    """A computation could not meet its contract."""


# boundary calculus
class NonZeroMean(NumericalFailure):
    pass


class GridMismatch(NumericalFailure):
    pass


# forward models
class UnknownFamily(ConfigError):
    pass


class DegenerateParameters(ConfigError):
    pass


class BoundaryLengthChanged(NumericalFailure):
    pass


class SolverFailure(NumericalFailure):
    pass


class NonConvergence(NumericalFailure):
    pass


# trace equations
class DenominatorDegenerate(NumericalFailure):
    pass


class Inconclusive(NumericalFailure):
    pass


class RankAmbiguous(NumericalFailure):
    pass


class AnchorNotFound(NumericalFailure):
    pass


class CodimMismatch(NumericalFailure):
    pass


class MinimizerEscaped(NumericalFailure):
    pass


class NotInKernel(NumericalFailure):
    pass


# argument principle
class TooCloseToCurve(NumericalFailure):
    pass


class NotAdmissible(NumericalFailure):
    pass


class QuadratureDegraded(NumericalFailure):
    pass


class CoverageGap(NumericalFailure):
    pass


class ImmersionFailure(NumericalFailure):
    pass


class ChartSingular(NumericalFailure):
    pass


# correspondence
class ImmediateFocusing(NumericalFailure):
    pass


class MultipleMinima(NumericalFailure):
    pass


class NewtonDiverged(NumericalFailure):
    pass


class DegenerateDifferential(NumericalFailure):
    pass


class EquivarianceBroken(NumericalFailure):
    pass


# experiments
class SweepFailed(NumericalFailure):
    pass
