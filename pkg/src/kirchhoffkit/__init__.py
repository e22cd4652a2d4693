"""kirchhoffkit: rigid body in a perfect fluid, desk-scale solver + checks."""

__version__ = "0.1.0"
