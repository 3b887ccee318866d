"""Exception hierarchy.

Every error raised on purpose by the package derives from `BumpsplitError`,
so callers (the CLI in particular) can map failures to exit codes without
catching unrelated exceptions.
"""


class BumpsplitError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InvalidParameterError(BumpsplitError, ValueError):
    exit_code = 2


class InvalidDomainError(BumpsplitError, ValueError):
    exit_code = 2


class BumpPlacementError(BumpsplitError, ValueError):
    """A bump (or a deformation support) does not fit where requested."""

    exit_code = 2


class UnknownEdgeError(BumpsplitError, LookupError):
    exit_code = 2


class MeshingError(BumpsplitError, RuntimeError):
    pass


class AmplitudeTooLargeError(BumpsplitError, RuntimeError):
    """Mesh motion would nearly invert an element.

    ``max_safe_t`` is the largest amplitude (found by bisection) for which
    every triangle keeps at least the guarded fraction of its area.
    """

    def __init__(self, message, max_safe_t):
        super().__init__(message)
        self.max_safe_t = max_safe_t


class SolverError(BumpsplitError, RuntimeError):
    pass


class DegenerateDiscriminantError(BumpsplitError, RuntimeError):
    pass


class BudgetError(InvalidParameterError):
    pass


class GeometryError(BumpsplitError, RuntimeError):
    """No admissible flat boundary piece for a bump inside the given ball."""


class SplitFailedError(BumpsplitError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvariantError(BumpsplitError, AssertionError):
    pass
