"""
Exception hierarchy shared by every module of the lab.

The command-line runner maps these classes onto its exit codes, so library
code raises them and never calls ``sys.exit`` itself.
"""

from typing import Optional


class GGSSLabError(Exception):
    """Base class for all errors raised by the lab."""

    exit_code = 1


class ValidationError(GGSSLabError):
    """
    Invalid argument, configuration value or precondition.

    Args:
        message (str): Human readable description
        line (Optional[int]): Line number in a config file, when the error
            comes from parsing one
    """

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValidationError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes: tuple):
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"shape mismatch in '{op}': {rendered}")
        self.op = op
        self.shapes = shapes


class GraphError(ValidationError):
    """Misuse of a computation graph, e.g. backward from a non-scalar root."""


class NumericalError(GGSSLabError):
    """
    A computation produced NaN or Inf.

    Args:
        message (str): Description of the failing computation
        step (Optional[int]): Timestep, iteration or epoch index of the abort
    """

    exit_code = 2

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step


class TheoremCheckFailure(GGSSLabError):
    """One or more empirical theorem validators failed."""

    exit_code = 3
