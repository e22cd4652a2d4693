"""Error types shared across the package.

Every failure mode a solver can signal is a named exception so the CLI can
map it to an exit code (see cli.py).
"""


class KirchhoffKitError(Exception):
    """Base class for all package errors."""


class ValidationError(KirchhoffKitError):
    """Scenario/config rejected before any numerics ran."""


class IncompatibleInitialData(ValidationError):
    """Initial data violates a compatibility condition (tangency, placement)."""

    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect


class NumericsError(KirchhoffKitError):
    """A solver detected that its own output cannot be trusted."""


class OutOfTube(KirchhoffKitError):
    """Point outside the tubular neighborhood where a distance field exists."""


class IncompatibleData(NumericsError):
    """Raw Neumann data fails the compatibility check before projection."""

    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect


class SingularSystem(NumericsError):
    """Boundary-integral system is numerically singular (degenerate mesh)."""


class GridTooCoarse(NumericsError):
    """Volume-quadrature residual check failed on the current grid."""


class NotPositiveDefinite(NumericsError):
    """The virtual inertia matrix lost positive definiteness."""


class DegenerateJacobian(NumericsError):
    """det of a flow deformation gradient wandered outside [0.9, 1.1]."""


class CollisionImminent(NumericsError):
    """Solid-to-wall clearance dropped below the configured floor."""


class NoContraction(NumericsError):
    """Picard iteration failed to contract (time horizon too large)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BoundViolation(KirchhoffKitError):
    """A generated integer coefficient exceeds its proven bound (a bug)."""


class SignViolation(KirchhoffKitError):
    """A generated coefficient has a forbidden sign (a bug)."""


class UnknownAtom(KirchhoffKitError):
    """Symbolic differentiation met an atom with no rewrite rule."""


class OrderViolation(KirchhoffKitError):
    """Radii passed to the three-circle inequality are out of order."""


class DegenerateSlit(KirchhoffKitError):
    """Joukowski map requested for a zero-length slit."""


class RadiusTooSmall(KirchhoffKitError):
    """The analyticity ellipse cannot contain the full time interval."""


class OutsideRadius(KirchhoffKitError):
    """Taylor series evaluation requested beyond the safety radius."""


class FitUndefined(KirchhoffKitError):
    """Analyticity-radius fit requested on degenerate (zero) data."""
