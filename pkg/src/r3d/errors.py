"""Exception hierarchy shared by all r3d modules."""


class R3DError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ValidationError(R3DError, ValueError):
    """Input violates a documented precondition."""

    exit_code = 2


class ParseError(ValidationError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EstimationError(R3DError, ArithmeticError):
    """Numerical estimation failed (singular design and similar)."""

    exit_code = 3


class WeakFirstStageError(EstimationError):
    """Treatment-share jump at the cutoff is too small for a Wald ratio."""

    def __init__(self, jump, floor):
        super().__init__(
            f"weak first stage: treatment share jump {jump:.3g} is below floor {floor:.3g}"
        )
        self.jump = jump
        self.floor = floor
