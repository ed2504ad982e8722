"""Exception hierarchy shared by all modules.

Each exception carries an ``exit_code`` used by the command line driver:
2 for I/O problems, 3 for numeric failures and 4 for validation errors.
"""


class SupersegError(Exception):
    exit_code = 4


# -- input validation -------------------------------------------------------


class ValidationError(SupersegError, ValueError):
    exit_code = 4


class NonFiniteInput(ValidationError):
    pass


class TooFewPoints(ValidationError):
    pass


class SampleCountExceedsPoints(ValidationError):
    pass


class NonUnitNormal(ValidationError):
    pass


class EmptyGraph(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class EmptySpec(ValidationError):
    pass


class EmptySuperpoint(ValidationError):
    pass


class TooFewSuperpoints(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class ConfigError(ValidationError):
    """Raised with the full list of violated fields."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# -- numeric failures -------------------------------------------------------


class NumericError(SupersegError, ArithmeticError):
    exit_code = 3


class DegenerateNeighborhood(NumericError):
    pass


class DegenerateRay(NumericError):
    pass


class DegenerateField(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, iteration, term):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite {term} loss at iteration {iteration}")


class PrototypeSeparationFailure(NumericError):
    pass


# -- file formats -----------------------------------------------------------


class FormatError(SupersegError, IOError):
    exit_code = 2


class MalformedHeader(FormatError):
    pass


class UnsupportedEncoding(FormatError):
    pass


class MissingProperty(FormatError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ResolutionError(FormatError):
    """A file referenced from another file could not be found."""

    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"referenced file not found: {self.path}")


class PayloadLengthMismatch(FormatError, LengthMismatch):
    """Binary payload size disagrees with its header."""
