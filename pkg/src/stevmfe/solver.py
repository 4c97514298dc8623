"""Monolithic Newton solve of one matching slab and the slab-by-slab time march."""

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from stevmfe.assembly import (
    BalanceRecord,
    SlabOperators,
    SlabSystem,
    build_operators,
    residual_and_jacobian,
    residual_norm,
    slab_balance,
)
from stevmfe.errors import EliminationError, NonConvergenceError
from stevmfe.models import (
    ModelKind,
    ModelProblem,
    initial_cell_values,
    van_genuchten_pc,
    van_genuchten_pc_derivative,
    van_genuchten_saturation,
)
from stevmfe.stmesh import DofMap, SpaceTimeMesh

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

DEFAULT_SATURATION_CLAMP = 0.2
DEFAULT_CAPILLARY_FACTOR = 10.0
# Effective saturation below which saturation updates are taken in capillary pressure.
CAPILLARY_BRANCH = 0.1
# Flux relaxation sweeps per iteration; the second picks up upwind flips.
FLUX_SWEEPS = 2
# Relative size below which a face block pivot counts as zero.
SINGULAR_PIVOT = 1e-14


@dataclass(frozen=True)
class SolverSettings:
    """Newton controls.

    ``saturation_clamp`` bounds each saturation update. ``capillary_factor``
    bounds the factor by which one update may change a cell's capillary
    pressure, so cells leave the capped branch of the curve in stages.
    """

    tolerance: float = 1e-6
    max_iterations: int = 20
    saturation_clamp: float | None = None
    capillary_factor: float | None = None

    @classmethod
    def for_model(cls, kind: ModelKind, tolerance: float = 1e-6, max_iterations: int = 20) -> "SolverSettings":
        """Defaults for a model kind: the two-phase model limits saturation updates."""
        two_phase = kind is ModelKind.TWO_PHASE
        return cls(
            tolerance=tolerance,
            max_iterations=max_iterations,
            saturation_clamp=DEFAULT_SATURATION_CLAMP if two_phase else None,
            capillary_factor=DEFAULT_CAPILLARY_FACTOR if two_phase else None,
        )


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Schur complement over cell unknowns plus the data needed to recover fluxes."""

    matrix: sp.csr_matrix
    rhs: FloatArray
    inverse: sp.csr_matrix
    a_up: sp.csr_matrix
    r_u: FloatArray

    @property
    def size(self) -> int:
        """Number of cell unknowns."""
        return int(self.matrix.shape[0])


@dataclass
class NewtonReport:
    """Iteration record of one slab."""

    slab: int
    iterations: int = 0
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    nonzeros: list[int] = field(default_factory=list)
    factor_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, object]:
        """Plain representation for JSON output."""
        return {
            "slab": self.slab,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_norms": list(self.residual_norms),
            "nonzeros": list(self.nonzeros),
            "factor_seconds": list(self.factor_seconds),
        }


@dataclass(frozen=True, eq=False)
class SlabSolution:
    """Converged unknowns of every time level in one slab."""

    slab: int
    cells: FloatArray
    fluxes: FloatArray
    report: NewtonReport
    balance: tuple[BalanceRecord, ...]


@dataclass
class SimulationState:
    """Committed trajectory: the initial state and every converged slab."""

    mesh: SpaceTimeMesh
    fields: tuple[str, ...]
    initial: FloatArray
    slabs: list[SlabSolution] = field(default_factory=list)

    @property
    def slab(self) -> int:
        """Number of committed slabs."""
        return len(self.slabs)

    @property
    def current(self) -> FloatArray:
        """Cell state ``(n_cells, n_fields)`` at the end of the last committed slab."""
        if not self.slabs:
            return self.initial
        return np.asarray(self.slabs[-1].cells[self.mesh.arrays.cell_final])

    @property
    def reports(self) -> list[NewtonReport]:
        """Newton report of each committed slab."""
        return [solution.report for solution in self.slabs]

    def column(self, name: str) -> int:
        """Column of a named field."""
        return self.fields.index(name)


def _face_blocks(system: SlabSystem) -> FloatArray:
    """Per-face ``(n_families, n_families)`` blocks of A_uu.

    Raises:
        EliminationError: If A_uu couples two different faces.
    """
    n_faces, n_families = system.n_faces, system.n_families
    coo = system.a_uu.tocoo()
    row_face, row_family = coo.row % n_faces, coo.row // n_faces
    col_face, col_family = coo.col % n_faces, coo.col // n_faces
    coupled = np.flatnonzero(row_face != col_face)
    if coupled.size:
        face = int(row_face[coupled[0]])
        msg = f"flux block couples face {face} to face {int(col_face[coupled[0]])}"
        raise EliminationError(msg)
    blocks = np.zeros((n_faces, n_families, n_families))
    np.add.at(blocks, (row_face, row_family, col_family), coo.data)
    return blocks


def flux_inverse(system: SlabSystem) -> sp.csr_matrix:
    """A_uu^-1, inverted face block by face block.

    Raises:
        EliminationError: If a face block is singular, naming the face.
    """
    blocks = _face_blocks(system)
    n_faces, n_families = system.n_faces, system.n_families
    diagonal = np.abs(np.diagonal(blocks, axis1=1, axis2=2))
    scale = max(float(diagonal.max(initial=0.0)), 1.0)
    # Flux blocks are lower triangular, so the diagonal decides invertibility.
    singular = np.flatnonzero(np.any(diagonal <= SINGULAR_PIVOT * scale, axis=1))
    if singular.size:
        msg = f"singular flux block on face {int(singular[0])}"
        raise EliminationError(msg)
    try:
        inverse_blocks = np.linalg.inv(blocks)
    except np.linalg.LinAlgError as exc:
        msg = f"flux block inversion failed: {exc}"
        raise EliminationError(msg) from exc

    faces = np.arange(n_faces)
    rows: list[npt.NDArray[np.int64]] = []
    cols: list[npt.NDArray[np.int64]] = []
    data: list[FloatArray] = []
    for m in range(n_families):
        for n in range(n_families):
            values = inverse_blocks[:, m, n]
            keep = values != 0.0
            rows.append(m * n_faces + faces[keep])
            cols.append(n * n_faces + faces[keep])
            data.append(values[keep])
    size = n_faces * n_families
    return sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))


def schur_reduce(system: SlabSystem) -> ReducedSystem:
    """Eliminate the flux unknowns of a slab system.

    The reduced system is ``S dp = -r_p + A_pu A_uu^-1 r_u`` with
    ``S = A_pp - A_pu A_uu^-1 A_up``.

    Raises:
        EliminationError: If a face block is singular, naming the face.
    """
    inverse = flux_inverse(system)
    coupling = system.a_pu @ inverse
    matrix = sp.csr_matrix(system.a_pp - coupling @ system.a_up)
    rhs = np.asarray(-system.r_p + coupling @ system.r_u, dtype=np.float64)
    return ReducedSystem(matrix=matrix, rhs=rhs, inverse=inverse, a_up=system.a_up, r_u=system.r_u)


def recover_fluxes(reduced: ReducedSystem, delta_cells: FloatArray) -> FloatArray:
    """Flux update by back-substitution: ``du = A_uu^-1 (-r_u - A_up dp)``."""
    return np.asarray(reduced.inverse @ (-reduced.r_u - reduced.a_up @ delta_cells), dtype=np.float64)


def solve_reduced(reduced: ReducedSystem) -> tuple[FloatArray, int, float]:
    """Sparse direct solve of the reduced system.

    Returns:
        The cell update, the non-zeros of S and the factorisation time in seconds.

    Raises:
        EliminationError: If S is singular.
    """
    start = time.perf_counter()
    try:
        factor = spla.splu(reduced.matrix.tocsc())
    except RuntimeError as exc:
        msg = f"reduced system of size {reduced.size} is singular: {exc}"
        raise EliminationError(msg) from exc
    delta = np.asarray(factor.solve(reduced.rhs), dtype=np.float64)
    return delta, int(reduced.matrix.nnz), time.perf_counter() - start


def relax_fluxes(system: SlabSystem, fluxes: FloatArray) -> FloatArray:
    """Fluxes that zero the flux rows with the cell unknowns held: ``u - A_uu^-1 r_u``."""
    step = -(flux_inverse(system) @ system.r_u)
    return fluxes + np.asarray(step, dtype=np.float64).reshape(system.n_families, system.n_faces).T


def limit_saturation_update(
    problem: ModelProblem, saturation: FloatArray, step: FloatArray, settings: SolverSettings
) -> FloatArray:
    """Water saturation after one limited Newton update.

    With capillary pressure on, cells near irreducible water take the update in
    capillary pressure, p_c + p_c'(s) ds, and every new p_c stays within
    ``capillary_factor`` of the old one. The saturation change is then clamped
    to ``saturation_clamp``.
    """
    s = np.asarray(saturation, dtype=np.float64)
    target = s + step
    capillary, factor = problem.capillary, settings.capillary_factor
    if capillary is not None and factor is not None:
        relperm = problem.relperm
        pc = van_genuchten_pc(s, capillary, relperm.s_wirr)
        d_pc = van_genuchten_pc_derivative(s, capillary, relperm.s_wirr)
        mobile = 1.0 - relperm.s_or - relperm.s_wirr
        steep = (d_pc != 0.0) & (s - relperm.s_wirr < CAPILLARY_BRANCH * mobile)
        pc_target = np.where(steep, pc + d_pc * step, van_genuchten_pc(target, capillary, relperm.s_wirr))
        pc_limited = np.clip(pc_target, pc / factor, pc * factor)
        remap = steep | (pc_limited != pc_target)
        target = np.where(remap, van_genuchten_saturation(pc_limited, capillary, relperm.s_wirr), target)
    if settings.saturation_clamp is not None:
        target = s + np.clip(target - s, -settings.saturation_clamp, settings.saturation_clamp)
    return np.asarray(target, dtype=np.float64)


def _apply_update(
    problem: ModelProblem,
    cells: FloatArray,
    fluxes: FloatArray,
    delta_cells: FloatArray,
    delta_fluxes: FloatArray,
    settings: SolverSettings,
) -> tuple[FloatArray, FloatArray]:
    n_elements, n_fields = cells.shape
    n_faces, n_families = fluxes.shape
    updated = cells + delta_cells.reshape(n_fields, n_elements).T
    if problem.kind is ModelKind.TWO_PHASE:
        step = updated[:, 1] - cells[:, 1]
        updated[:, 1] = limit_saturation_update(problem, cells[:, 1], step, settings)
    flux_step = delta_fluxes.reshape(n_families, n_faces).T
    return updated, fluxes + flux_step


def newton_solve_slab(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    dofmap: DofMap,
    previous: FloatArray,
    slab: int,
    settings: SolverSettings | None = None,
    initial_fluxes: FloatArray | None = None,
    operators: SlabOperators | None = None,
) -> SlabSolution:
    """Solve every time level of one slab at once.

    Each iteration assembles the slab system, relaxes the fluxes onto the flux
    rows at the current cell state, eliminates the fluxes and solves the reduced
    system with a sparse LU factorisation. At least one update is applied;
    convergence is tested on the max-norm of the residual after it.

    Args:
        problem: Physics and data.
        mesh: The mesh.
        dofmap: Unknown enumeration.
        previous: Cell state at the start of the slab ``(n_cells, n_fields)``.
        slab: Slab index.
        settings: Newton controls.
        initial_fluxes: Starting flux guess, e.g. the previous slab's fluxes.
        operators: Precomputed assembly operators.

    Returns:
        The converged slab with its Newton report and mass balance.

    Raises:
        NonConvergenceError: If ``max_iterations`` updates do not converge.
    """
    settings = settings if settings is not None else SolverSettings.for_model(problem.kind)
    ops = operators if operators is not None else build_operators(problem, mesh)
    cells = np.asarray(previous[mesh.arrays.el_cell], dtype=np.float64).copy()
    fluxes = (
        np.asarray(initial_fluxes, dtype=np.float64).copy()
        if initial_fluxes is not None
        else np.zeros((mesh.n_faces, len(dofmap.families)))
    )
    report = NewtonReport(slab=slab)

    while True:
        system = residual_and_jacobian(problem, mesh, dofmap, cells, fluxes, previous, slab, ops)
        for _ in range(FLUX_SWEEPS):
            if not system.r_u.size or float(np.max(np.abs(system.r_u))) <= 0.1 * settings.tolerance:
                break
            fluxes = relax_fluxes(system, fluxes)
            system = residual_and_jacobian(problem, mesh, dofmap, cells, fluxes, previous, slab, ops)
        norm = residual_norm(system, mesh)
        report.residual_norms.append(norm)
        logger.debug("Slab %d iteration %d: residual %.3e", slab, report.iterations, norm)
        if report.iterations > 0 and norm < settings.tolerance:
            report.converged = True
            break
        if report.iterations >= settings.max_iterations:
            msg = (
                f"Newton did not converge on slab {slab} after {report.iterations} iterations "
                f"(residual {norm:.3e}, tolerance {settings.tolerance:.1e})"
            )
            raise NonConvergenceError(msg, slab=slab, report=report)

        reduced = schur_reduce(system)
        delta_cells, nonzeros, seconds = solve_reduced(reduced)
        delta_fluxes = recover_fluxes(reduced, delta_cells)
        report.nonzeros.append(nonzeros)
        report.factor_seconds.append(seconds)
        logger.debug("Slab %d: factorised %d non-zeros in %.4f s", slab, nonzeros, seconds)
        cells, fluxes = _apply_update(problem, cells, fluxes, delta_cells, delta_fluxes, settings)
        report.iterations += 1

    balance = tuple(slab_balance(problem, mesh, ops, cells, fluxes, previous, slab))
    logger.info("Slab %d converged in %d iteration(s), residual %.3e", slab, report.iterations, norm)
    return SlabSolution(slab=slab, cells=cells, fluxes=fluxes, report=report, balance=balance)


def advance(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    dofmap: DofMap,
    settings: SolverSettings | None = None,
    initial: FloatArray | None = None,
    on_slab: Callable[[SimulationState, SlabSolution], None] | None = None,
) -> SimulationState:
    """March through every slab of the mesh.

    Each slab starts from the final level of the previous one, and its flux
    guess from the previous slab's converged fluxes.

    Args:
        problem: Physics and data.
        mesh: The mesh; its slab count fixes the end time.
        dofmap: Unknown enumeration.
        settings: Newton controls.
        initial: Initial cell state; defaults to the problem's initial data.
        on_slab: Called after every committed slab.

    Returns:
        The full trajectory.

    Raises:
        NonConvergenceError: From the first slab that fails, with its index.
    """
    start = initial if initial is not None else initial_cell_values(problem, mesh.arrays.cell_centre)
    state = SimulationState(mesh=mesh, fields=dofmap.fields, initial=np.asarray(start, dtype=np.float64))
    ops = build_operators(problem, mesh)
    fluxes: FloatArray | None = None
    for slab in range(mesh.n_slabs):
        solution = newton_solve_slab(problem, mesh, dofmap, state.current, slab, settings, fluxes, ops)
        state.slabs.append(solution)
        fluxes = solution.fluxes
        if on_slab is not None:
            on_slab(state, solution)
    return state
