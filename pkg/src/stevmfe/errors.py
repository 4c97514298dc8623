"""Exception hierarchy for mesh construction, assembly and solves."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from stevmfe.solver import NewtonReport


class ConfigurationError(ValueError):
    """Invalid run, mesh or model configuration."""


class UnsupportedMeshError(ConfigurationError):
    """Interface geometry the enhanced-velocity construction cannot represent."""


class IngestionError(ValueError):
    """Malformed scalar-field input file."""


class SingularCoefficientError(ValueError):
    """Zero coefficient in a velocity mass term."""


class AssemblyError(RuntimeError):
    """Non-finite residual or Jacobian entry."""


class EliminationError(RuntimeError):
    """Singular flux block met during Schur-complement elimination."""


class NonConvergenceError(RuntimeError):
    """Newton iteration cap exceeded on a slab."""

    def __init__(self, message: str, slab: int, report: NewtonReport) -> None:
        """Initialise with the failing slab and its iteration record.

        Args:
            message: Human-readable description.
            slab: Index of the slab that failed.
            report: Newton report up to the point of failure.
        """
        super().__init__(message)
        self.slab = slab
        self.report = report
