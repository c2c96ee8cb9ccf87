"""Exception hierarchy shared by every irs_vlp module."""


class VlpError(Exception):
    """Root of all irs_vlp errors."""


class ConfigError(VlpError, ValueError):
    """Scenario file could not be parsed or holds an invalid value."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class SceneValidationError(ConfigError):
    """Scene failed one or more invariant checks."""

    def __init__(self, violations: list[str]):
        super().__init__("Invalid scene: " + "; ".join(violations))
        self.violations = violations


class GeometryError(VlpError, ValueError):
    """Degenerate geometry: coincident points, overflowing grids, collinearity."""


class ClampBoundaryError(GeometryError):
    """A clamped factor sits within epsilon of zero, so derivatives are undefined."""


class BoundsError(VlpError, ArithmeticError):
    """A matrix needed by a bound is singular or ill-conditioned."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition


class EstimationError(VlpError, RuntimeError):
    """Estimation could not produce a result."""
