"""Exception types shared across the package."""


class ConvexDPError(Exception):
    """Base class for all package errors."""


class NonNestedDomains(ConvexDPError):
    """Staged boxes are not nested (box(t) must be contained in box(t+1))."""


class BoundsOffLattice(ConvexDPError):
    """A stage bound does not lie on the spacing lattice of the final box."""


class PointOutsideDomain(ConvexDPError):
    """A state lies outside the stage box beyond the clamp tolerance."""


class PointOutsideCell(ConvexDPError):
    """A query point lies outside the given cell beyond the clamp tolerance."""


class NotConvexEligible(ConvexDPError):
    """Problem structure does not admit the convex-program Bellman route."""


class EmptyActionGrid(ConvexDPError):
    """An action enumeration was requested with no candidates."""


class EmptyActionSet(ConvexDPError):
    """The admissible action set is empty."""


class InfeasibleProgram(ConvexDPError):
    """The per-state program has no feasible point (inclusion violated?)."""


class SolverFailure(ConvexDPError):
    """A solver returned a non-optimal status where an optimum was required."""


class TreeTooLarge(ConvexDPError):
    """Exact disturbance-tree evaluation would exceed the configured cap."""


class InclusionViolation(ConvexDPError):
    """One-step dynamics leave the next stage box; see the report for details."""


class ParseError(ConvexDPError):
    """A problem configuration file could not be parsed."""


class ValidationError(ConvexDPError):
    """A problem configuration violates invariants; message lists every one."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(
            f"  - {v}" for v in self.violations))
