"""Exception hierarchy shared by every module."""


class BCPTError(Exception):
    """Base class for all package errors."""


class StructuralError(BCPTError, ValueError):
    """Shapes, labels or alignments do not fit together (or NaN input)."""


class EmptyInputError(BCPTError, ValueError):
    pass


class InvalidArgumentError(BCPTError, ValueError):
    pass


class NumericalDegeneracyError(BCPTError, ArithmeticError):
    """A normalisation would divide by a zero-norm vector."""


class TrainingDivergedError(BCPTError, ArithmeticError):
    def __init__(self, iteration, message="non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
