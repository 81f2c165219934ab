"""Exception hierarchy and CLI exit codes"""
from typing import Optional


class LabError(Exception):
    """Base class for every error raised by the lab"""

    exit_code = 3


class ConfigError(LabError, ValueError):
    """Invalid run configuration or unusable settings"""

    exit_code = 2


class ConfigMismatchError(ConfigError):
    """A store and an extraction come from different run configurations"""

    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            f"Config hash mismatch: expected {expected[:12]}, store carries {found[:12]}"
        )


class NumericalError(LabError, RuntimeError):
    """A numerical procedure could not deliver a trustworthy result"""

    exit_code = 3


class ToleranceNotReachedError(NumericalError):
    """Quadrature refinement exhausted before the tolerance was met"""

    def __init__(self, label: str, estimate: float, error: float, nodes: int):
        self.estimate = estimate
        self.error = error
        self.nodes = nodes
        super().__init__(
            f"{label}: tolerance not reached at {nodes} nodes/axis "
            f"(estimate={estimate:.6e}, last change={error:.3e})"
        )


class ParticleOutsideMeshError(NumericalError):
    """A particle left the deposit mesh"""

    def __init__(self, particle: int, time: float, position=None):
        self.particle = particle
        self.time = time
        self.position = position
        super().__init__(
            f"Particle {particle} outside deposit mesh at t={time:.6g}"
            + (f" (position {list(position)})" if position is not None else "")
            + "; increase half_extent or extent_margin"
        )


class IllConditionedFitError(NumericalError):
    """Least-squares system too ill-conditioned to separate the basis"""

    def __init__(self, condition: float, threshold: float):
        self.condition = condition
        self.threshold = threshold
        super().__init__(
            f"Fit refused: condition number {condition:.3e} exceeds {threshold:.1e}; "
            "widen the fit window or lower the expansion order"
        )


class RankDeficientFitError(NumericalError):
    """Least-squares design matrix lost rank"""


class InversionNotConvergedError(NumericalError):
    """Fixed-point inversion of the modification map did not converge"""

    def __init__(self, residual: float, failed_fraction: Optional[float] = None):
        self.residual = residual
        self.failed_fraction = failed_fraction
        message = f"Inversion did not converge (residual={residual:.3e})"
        if failed_fraction is not None:
            message += f", failed mass fraction {failed_fraction:.2%}"
        super().__init__(message)


class PeelOffDivergedError(NumericalError):
    """Sequential peel-off residual grew between stages"""


class CoverageError(NumericalError):
    """Test function support holds too few particles"""


class UnsupportedDerivativeOrderError(LabError, ValueError):
    """Requested derivative order beyond the supported maximum"""

    exit_code = 2


class GridError(LabError, ValueError):
    """Non-uniform grid, mismatched geometries or point outside the grid"""

    exit_code = 2
