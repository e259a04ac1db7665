"""Exception hierarchy shared across the package.

Two families map onto CLI exit codes: ``ValidationError`` (bad input,
exit 1) and ``NumericalError`` (a computation broke down, exit 2).
"""


class AAShNetError(Exception):
    pass


class ValidationError(AAShNetError, ValueError):
    pass


class NumericalError(AAShNetError, ArithmeticError):
    pass


class UnsupportedPrimitiveError(ValidationError):
    def __init__(self, name):
        super().__init__(f"unsupported primitive: {name!r}")
        self.name = name


class ShapeError(ValidationError):
    pass


class NonFiniteError(NumericalError):
    pass


class FixedPointOverflowError(NumericalError):
    def __init__(self, step, detail=""):
        msg = f"fixed-point overflow at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.step = step


class ReversalError(NumericalError):
    """Bit stack underflow, checkpoint miss, or a state/buffer mismatch."""


class ConvergenceError(NumericalError):
    pass
