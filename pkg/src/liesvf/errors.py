"""Exception hierarchy shared by every module in the package."""


class SvfError(Exception):
    """Base class for all errors raised by liesvf."""


class NonFiniteInput(SvfError, ValueError):
    pass


class AtCutLocus(SvfError, ValueError):
    """Logarithm requested within the cut-locus tolerance of angle pi."""


class KindMismatch(SvfError, ValueError):
    pass


class NotAGroup(SvfError, TypeError):
    """Group operation requested on the 2-sphere."""


class OutsideChart(SvfError, ValueError):
    pass


class SingularJacobian(SvfError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NoConvergence(SvfError, ArithmeticError):
    pass


class ShapeMismatch(SvfError, ValueError):
    pass


class GraphNotScalar(SvfError, ValueError):
    pass


class FrameMismatch(SvfError, ValueError):
    pass


class NonFiniteLoss(SvfError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class EmptyDataset(SvfError, ValueError):
    pass


class SchemaError(SvfError, ValueError):
    pass


class KindUnknown(SchemaError):
    pass


class ConsecutiveAntipodal(SvfError, ValueError):
    pass


class CurveTooLarge(SvfError, ValueError):
    pass


class UnsupportedGridKind(SvfError, ValueError):
    pass


class JointLimit(SvfError, ValueError):
    pass


class InvalidElement(SvfError, ValueError):
    """Array does not satisfy the group-element invariants (orthonormality, unit norm)."""
