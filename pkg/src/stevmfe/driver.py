"""Simulation runs, mass-balance and Newton reports, error norm and the refinement study."""

import csv
import json
import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from stevmfe.assembly import BalanceRecord
from stevmfe.config import ConvergenceSettings, RunConfig, load_config
from stevmfe.errors import NonConvergenceError
from stevmfe.fields import FieldWriter
from stevmfe.models import (
    BoundaryCondition,
    BoundaryKind,
    InitialData,
    ManufacturedForcing,
    ModelKind,
    ModelProblem,
    manufactured_solution,
)
from stevmfe.solver import SimulationState, SlabSolution, SolverSettings, advance
from stevmfe.stmesh import MeshSpec, SpaceTimeMesh, Subdomain, build_mesh, enumerate_dofs, validate_matching_times

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ExactSolution = Callable[[FloatArray, FloatArray], FloatArray]

BALANCE_COLUMNS = (
    "slab",
    "quantity",
    "stored_change",
    "well_net",
    "source",
    "boundary_outflow",
    "imbalance",
    "cumulative_imbalance",
)
ERROR_COLUMNS = ("h_c", "h_f", "err_coarse", "err_fine", "cell_dofs", "CPUTIM", "newton_max")


class SimulationRunner:
    """Runs a configured simulation and writes its outputs."""

    def __init__(self, config: RunConfig, output_dir: Path | None = None) -> None:
        """Initialise the runner.

        Args:
            config: Validated run configuration with a mesh block.
            output_dir: Overrides the configured output directory.
        """
        self.config = config
        self.output_dir = output_dir if output_dir is not None else config.output.directory
        self.balance: list[BalanceRecord] = []
        self.reports: list[dict[str, object]] = []
        self.files: list[Path] = []

    def run(self) -> SimulationState:
        """Build the mesh, march every slab and write snapshots and reports.

        Raises:
            ConfigurationError: If the mesh is invalid.
            NonConvergenceError: If a slab fails; reports up to it are still written.
        """
        config = self.config
        mesh = build_mesh(config.require_mesh())
        validate_matching_times(mesh)
        dofmap = enumerate_dofs(mesh, config.model.fields, config.model.families)
        writer = FieldWriter(mesh, dofmap.fields, self.output_dir)
        every = config.output.snapshot_every
        logger.info(
            "Running %s model from %s: %d slabs, %d unknowns per slab",
            config.model.kind,
            config.source or "an in-memory config",
            mesh.n_slabs,
            dofmap.total,
        )

        def on_slab(state: SimulationState, solution: SlabSolution) -> None:
            self.balance.extend(solution.balance)
            self.reports.append(solution.report.to_dict())
            last = solution.slab == mesh.n_slabs - 1
            if (solution.slab + 1) % every == 0 or last:
                self.files.extend(writer.write(solution.slab, solution.cells, config.output.formats))

        try:
            state = advance(config.model, mesh, dofmap, config.solver, on_slab=on_slab)
        except NonConvergenceError as exc:
            self.reports.append(exc.report.to_dict())
            raise
        finally:
            self._write_reports()
        logger.info("Wrote %d snapshot files to %s", len(self.files), self.output_dir)
        return state

    def _write_reports(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        newton_path = self.output_dir / "newton_reports.json"
        newton_path.write_text(json.dumps(self.reports, indent=2) + "\n", encoding="utf-8")
        balance_path = self.output_dir / "mass_balance.csv"
        write_balance(self.balance, balance_path)
        self.files.extend([newton_path, balance_path])


def write_balance(records: list[BalanceRecord], path: Path) -> None:
    """Write per-slab budgets with the running imbalance of each quantity."""
    cumulative: dict[str, float] = {}
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(BALANCE_COLUMNS)
        for record in records:
            cumulative[record.quantity] = cumulative.get(record.quantity, 0.0) + record.imbalance
            writer.writerow(
                [
                    record.slab,
                    record.quantity,
                    repr(record.stored_change),
                    repr(record.well_net),
                    repr(record.source),
                    repr(record.boundary_outflow),
                    repr(record.imbalance),
                    repr(cumulative[record.quantity]),
                ]
            )


def run(config_path: Path, output_dir: Path | None = None) -> SimulationState:
    """Load a configuration and run it; see ``SimulationRunner``."""
    return SimulationRunner(load_config(config_path), output_dir).run()


def fine_subdomains(mesh: SpaceTimeMesh) -> frozenset[int]:
    """Subdomains stepping faster than the slowest one."""
    coarsest = max(sub.dt for sub in mesh.subdomains)
    return frozenset(sub.id for sub in mesh.subdomains if sub.dt < coarsest)


def l2_spacetime_error(
    state: SimulationState, exact: ExactSolution, fine: frozenset[int] | None = None
) -> tuple[float, float]:
    """Space-time L2 error of the first field over the coarse and fine subdomain families.

    Each family's error is sqrt(sum over elements of (exact(midpoint) - P)^2 |E|).

    Args:
        state: Trajectory of the linear model.
        exact: Vectorised exact solution of (centres, absolute times).
        fine: Ids of the fine family; defaults to ``fine_subdomains``.

    Returns:
        The coarse-family and fine-family errors.
    """
    mesh = state.mesh
    arrays = mesh.arrays
    fine_ids = fine if fine is not None else fine_subdomains(mesh)
    in_fine = np.isin(arrays.el_sub, list(fine_ids))
    measure = arrays.el_measure
    sums = {True: 0.0, False: 0.0}
    for solution in state.slabs:
        t = mesh.slab_start(solution.slab) + arrays.el_t_mid
        squared = (exact(arrays.el_centre, t) - solution.cells[:, 0]) ** 2 * measure
        sums[True] += math.fsum(squared[in_fine])
        sums[False] += math.fsum(squared[~in_fine])
    return math.sqrt(sums[False]), math.sqrt(sums[True])


@dataclass(frozen=True)
class ErrorRow:
    """One refinement level of a convergence study."""

    h_c: float
    h_f: float
    err_coarse: float
    err_fine: float
    cell_dofs: int
    seconds: float
    newton_max: int


@dataclass(frozen=True)
class ErrorReport:
    """Rows of a convergence study, ordered from coarsest to finest."""

    rows: tuple[ErrorRow, ...]

    def rates(self) -> list[tuple[float, float]]:
        """Observed orders log(e_k / e_k+1) / log(h_k / h_k+1) of the coarse and fine errors."""
        return [
            (
                math.log(a.err_coarse / b.err_coarse) / math.log(a.h_c / b.h_c),
                math.log(a.err_fine / b.err_fine) / math.log(a.h_f / b.h_f),
            )
            for a, b in zip(self.rows, self.rows[1:], strict=False)
        ]

    def to_csv(self, path: Path) -> Path:
        """Write the report with full-precision values."""
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(ERROR_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [
                        repr(row.h_c),
                        repr(row.h_f),
                        repr(row.err_coarse),
                        repr(row.err_fine),
                        row.cell_dofs,
                        f"{row.seconds:.3f}",
                        row.newton_max,
                    ]
                )
        return path


def convergence_mesh_spec(settings: ConvergenceSettings, cells_per_unit: int) -> MeshSpec:
    """Unit square with a refined box at the origin and two coarse boxes around it.

    Coarse cells and steps have size 1/n; the fine box is refined ``refinement``
    times in space and time, and one slab is one coarse step.
    """
    n = cells_per_unit
    fx, fy = settings.fine_extent
    nx, ny = round(fx * n), round(fy * n)
    r = settings.refinement
    h = 1.0 / n
    subdomains = (
        Subdomain.uniform(0, (0.0, 0.0), (fx, fy), (nx * r, ny * r), h / r),
        Subdomain.uniform(1, (fx, 0.0), (1.0 - fx, 1.0), (n - nx, n), h),
        Subdomain.uniform(2, (0.0, fy), (fx, 1.0 - fy), (nx, n - ny), h),
    )
    return MeshSpec(origin=(0.0, 0.0), extent=(1.0, 1.0), t_end=1.0, subdomains=subdomains, slab_length=h)


def convergence_problem(c1: float) -> ModelProblem:
    """Linear parabolic problem whose exact solution is ``manufactured_solution``."""
    exact = BoundaryCondition(kind=BoundaryKind.DIRICHLET, exact=True)
    return ModelProblem(
        kind=ModelKind.LINEAR_PARABOLIC,
        boundary={side: exact for side in ("x_low", "x_high", "y_low", "y_high")},
        initial=InitialData(manufactured=True),
        forcing=ManufacturedForcing(c1=c1),
    )


def cell_dof_count(mesh: SpaceTimeMesh, n_fields: int = 1) -> int:
    """Cell unknowns over every slab of a mesh."""
    return mesh.n_elements * n_fields * mesh.n_slabs


def convergence_study(
    settings: ConvergenceSettings, solver: SolverSettings | None = None, levels: tuple[int, ...] | None = None
) -> ErrorReport:
    """Run the manufactured-solution study at every refinement level.

    Args:
        settings: Study geometry, refinement and forcing.
        solver: Newton controls.
        levels: Subset of levels to run; defaults to ``settings.levels``.

    Returns:
        One row per level.
    """
    problem = convergence_problem(settings.c1)
    c1 = settings.c1

    def exact(centres: FloatArray, t: FloatArray) -> FloatArray:
        pressure, _ = manufactured_solution(centres[:, 0], centres[:, 1], t, c1)
        return pressure

    rows = []
    for n in levels if levels is not None else settings.levels:
        mesh = build_mesh(convergence_mesh_spec(settings, n))
        dofmap = enumerate_dofs(mesh, problem.fields, problem.families)
        start = time.perf_counter()
        state = advance(problem, mesh, dofmap, solver)
        seconds = time.perf_counter() - start
        err_coarse, err_fine = l2_spacetime_error(state, exact)
        row = ErrorRow(
            h_c=1.0 / n,
            h_f=1.0 / (n * settings.refinement),
            err_coarse=err_coarse,
            err_fine=err_fine,
            cell_dofs=cell_dof_count(mesh),
            seconds=seconds,
            newton_max=max(report.iterations for report in state.reports),
        )
        logger.info(
            "Level h_c=1/%d: coarse error %.4e, fine error %.4e, %d cell unknowns, %.2f s",
            n,
            row.err_coarse,
            row.err_fine,
            row.cell_dofs,
            row.seconds,
        )
        rows.append(row)
    return ErrorReport(rows=tuple(rows))
