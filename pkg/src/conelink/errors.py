"""Exception hierarchy for the solver.

Every error surfaced to the command line maps to exactly one documented exit
code; see :mod:`conelink.cli`.
"""


class ConelinkError(Exception):
    """Base class for all package errors."""


class ConfigError(ConelinkError):
    """Malformed or schema-invalid run configuration (exit code 2)."""


class HypothesisError(ConelinkError):
    """A structural hypothesis of the theory is violated (exit code 3)."""


class NotOblique(HypothesisError):
    """The pair of bodies fails the (partial) obliqueness predicate."""


class HypothesisViolated(HypothesisError):
    """Density hypotheses fail (beta <= alpha, or vanishing order too high)."""


class EmptySlice(HypothesisError):
    """The slice of the source body with the split subspace has empty interior."""


class NoConvergence(ConelinkError):
    """The descent loop ran out of iterations (exit code 4).

    Carries the best iterate found so far in ``bundle``.
    """

    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle


class InternalInconsistency(ConelinkError):
    """Two formulations that must agree disagree; indicates a bug (exit code 5)."""


class InconsistentPredicates(InternalInconsistency):
    """Equivalent obliqueness formulations returned different answers."""


class OriginNotInterior(ConelinkError):
    """Polar duality requested for a body without the origin in its interior."""


class DegenerateBody(ConelinkError):
    """A polytope with empty interior where a solid body is required."""


class ApexEvaluation(ConelinkError):
    """Cone density evaluated at height <= 0."""


class QuadratureUnderflow(ConelinkError):
    """Both integrals of a doubling ratio are below the machine floor."""


class GradientUndefined(ConelinkError):
    """Piecewise-linear gradient requested on a zero-volume simplex."""


class EmptyInterior(ConelinkError):
    """The sublevel set {w < 0} is empty; the candidate function is inadmissible."""


class EmptyDomain(EmptyInterior):
    """Integration domain is empty."""


class NonPositiveV(ConelinkError):
    """A function that must be positive on the link has min <= 0."""


class EnergyUndefined(ConelinkError):
    """Energy evaluation failed; ``cause`` holds the offending sub-error."""

    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


class DivergentEnergy(InternalInconsistency):
    """Energy fell below the recorded theoretical floor for an oblique pair."""


class NewtonStall(ConelinkError):
    """The normalization Newton iteration stopped making progress."""


class ConfigMismatch(ConelinkError):
    """An oracle was requested for data it does not cover."""


class NoRoot(ConelinkError):
    """Shooting multistart exhausted its grid without finding a root.

    ``landscape`` holds (v0, dv0, residual-norm) triples for diagnosis.
    """

    def __init__(self, message, landscape=None):
        super().__init__(message)
        self.landscape = landscape


class IncompatibleRuns(ConelinkError):
    """compare() called on runs with different geometry or densities."""


class OutsideCone(ConelinkError):
    """Cone potential evaluated at a point whose link projection leaves the body."""
