"""Exception hierarchy shared across the toolkit."""


class SoftDiffError(Exception):
    """Base class for all library errors."""


class ParseError(SoftDiffError):
    """A mesh or config file could not be parsed."""


class DegenerateElement(SoftDiffError):
    """A tetrahedron has (numerically) zero volume."""


class IndexOutOfRange(SoftDiffError):
    """A node index references a node that does not exist."""


class InvertedElement(SoftDiffError):
    """det F <= 0 where the material law requires a positive Jacobian."""


class FactorizationFailure(SoftDiffError):
    """The projected system matrix could not be factorized or the solve
    residual exceeded the acceptance threshold."""


class DimensionMismatch(SoftDiffError):
    """Vector/matrix dimensions are inconsistent."""


class DegenerateSegment(SoftDiffError):
    """A cable segment has (numerically) zero length."""


class MaxIterations(SoftDiffError):
    """An iterative geometric query failed to terminate."""


class SingularSystem(SoftDiffError):
    """The implicit-differentiation system is rank deficient beyond
    smoothing repair."""


class NoConvergence(SoftDiffError):
    """An iterative solver hit max_iter above tolerance.

    Carries the best iterate so callers can inspect or reuse it.
    """

    def __init__(self, message, best=None, residual=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations


class AmbiguousMode(SoftDiffError):
    """A contact fits no mode bucket (reported by classify_modes in strict
    mode; the default path flags and treats it as sliding)."""


class SingularAtModeBoundary(SoftDiffError):
    """The fixed-mode sensitivity system is rank deficient: a contact sits
    at the boundary between two modes."""


class Diverged(SoftDiffError):
    """An optimization loop increased its cost too many times in a row."""


class NoFeasiblePattern(SoftDiffError):
    """The brute-force contact-mode enumeration found no feasible pattern
    (indicates a solver or model bug)."""


class ConfigError(SoftDiffError):
    """A scenario configuration is invalid; message pinpoints the field."""
