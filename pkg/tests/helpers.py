"""Meshes, problems and state packing shared by the tests."""

import numpy as np
import numpy.typing as npt

from stevmfe.models import (
    BoundaryCondition,
    BoundaryKind,
    CapillaryParams,
    FluidProps,
    InitialData,
    ModelKind,
    ModelProblem,
    WellKind,
    WellSpec,
)
from stevmfe.stmesh import DofMap, MeshSpec, SpaceTimeMesh, Subdomain, build_mesh, enumerate_dofs

FloatArray = npt.NDArray[np.float64]


def two_block_spec(t_end: float = 2.0) -> MeshSpec:
    """[0, 2] x [0, 1]: a 2x2 block stepping 0.5 beside a 1x1 block stepping 1."""
    return MeshSpec(
        origin=(0.0, 0.0),
        extent=(2.0, 1.0),
        t_end=t_end,
        subdomains=(
            Subdomain.uniform(0, (0.0, 0.0), (1.0, 1.0), (2, 2), 0.5),
            Subdomain.uniform(1, (1.0, 0.0), (1.0, 1.0), (1, 1), 1.0),
        ),
    )


def two_block_mesh(t_end: float = 2.0) -> SpaceTimeMesh:
    """Built ``two_block_spec``."""
    return build_mesh(two_block_spec(t_end))


def single_block_spec(
    cells: tuple[int, ...] = (4, 3),
    extent: tuple[float, ...] = (2.0, 1.5),
    dt: float = 0.25,
    t_end: float = 0.75,
    permeability: FloatArray | None = None,
    porosity: float = 1.0,
) -> MeshSpec:
    """One subdomain covering the whole box, optionally with heterogeneous permeability."""
    sub = Subdomain.uniform(0, (0.0,) * len(cells), extent, cells, dt, porosity=porosity)
    if permeability is not None:
        sub = Subdomain(
            id=0,
            origin=sub.origin,
            extent=sub.extent,
            cells=sub.cells,
            dt=dt,
            permeability=permeability,
            porosity=sub.porosity,
        )
    return MeshSpec(origin=(0.0,) * len(cells), extent=extent, t_end=t_end, subdomains=(sub,))


def dofs_for(problem: ModelProblem, mesh: SpaceTimeMesh) -> DofMap:
    """DOF map of a problem's fields and flux families."""
    return enumerate_dofs(mesh, problem.fields, problem.families)


def pack(cells: FloatArray, fluxes: FloatArray) -> FloatArray:
    """State in DOF-map order: cells field-major, then fluxes family-major."""
    return np.concatenate([cells.T.ravel(), fluxes.T.ravel()])


def unpack(
    x: FloatArray, n_elements: int, n_fields: int, n_faces: int, n_families: int
) -> tuple[FloatArray, FloatArray]:
    """Inverse of ``pack``."""
    split = n_elements * n_fields
    cells = x[:split].reshape(n_fields, n_elements).T.copy()
    fluxes = x[split:].reshape(n_families, n_faces).T.copy()
    return cells, fluxes


def linear_problem(dirichlet: bool = True, wells: bool = True, source: float = 0.0) -> ModelProblem:
    """Linear parabolic problem with a Dirichlet east side and a well pair."""
    boundary = {"x_high": BoundaryCondition(kind=BoundaryKind.DIRICHLET, value=0.5)} if dirichlet else {}
    well_specs = (
        (
            WellSpec(name="inj", subdomain=0, index=(0, 0), kind=WellKind.INJECTOR, rate=0.3),
            WellSpec(
                name="prod",
                subdomain=0 if not dirichlet else 1,
                index=(1, 1) if not dirichlet else (0, 0),
                kind=WellKind.PRODUCER,
                bottom_hole_pressure=-0.2,
                well_index=0.7,
            ),
        )
        if wells
        else ()
    )
    return ModelProblem(
        kind=ModelKind.LINEAR_PARABOLIC,
        water=FluidProps(viscosity=2.0),
        wells=well_specs,
        boundary=boundary,
        initial=InitialData(pressure=1.0),
        source=source,
    )


def tracer_problem(
    dirichlet: bool = True, compressibility: float = 0.1, producer: tuple[int, tuple[int, ...]] = (1, (0, 0))
) -> ModelProblem:
    """Compressible tracer problem with an injector, a producer and an optional Dirichlet side."""
    boundary = (
        {"x_low": BoundaryCondition(kind=BoundaryKind.DIRICHLET, value=1.2, concentration=0.5)} if dirichlet else {}
    )
    return ModelProblem(
        kind=ModelKind.SINGLE_PHASE_TRACER,
        water=FluidProps(
            reference_density=1.3, reference_pressure=1.0, compressibility=compressibility, viscosity=0.8
        ),
        diffusion=0.05,
        wells=(
            WellSpec(name="inj", subdomain=0, index=(1, 0), kind=WellKind.INJECTOR, rate=0.4, concentration=1.0),
            WellSpec(
                name="prod",
                subdomain=producer[0],
                index=producer[1],
                kind=WellKind.PRODUCER,
                bottom_hole_pressure=0.6,
                well_index=0.9,
            ),
        ),
        boundary=boundary,
        initial=InitialData(pressure=1.0, concentration=0.0),
    )


def two_phase_problem(
    capillary: bool = True, wells: bool = True, producer: tuple[int, tuple[int, ...]] = (1, (0, 0))
) -> ModelProblem:
    """Two-phase problem with distinct compressible phases and an injector/producer pair."""
    well_specs = (
        (
            WellSpec(name="inj", subdomain=0, index=(0, 0), kind=WellKind.INJECTOR, rate=0.05),
            WellSpec(
                name="prod",
                subdomain=producer[0],
                index=producer[1],
                kind=WellKind.PRODUCER,
                bottom_hole_pressure=0.8,
                well_index=0.5,
            ),
        )
        if wells
        else ()
    )
    return ModelProblem(
        kind=ModelKind.TWO_PHASE,
        water=FluidProps(reference_density=1.0, reference_pressure=1.0, compressibility=0.05, viscosity=1.0),
        oil=FluidProps(reference_density=0.85, reference_pressure=1.0, compressibility=0.1, viscosity=3.0),
        capillary=CapillaryParams(a=0.05) if capillary else None,
        wells=well_specs,
        initial=InitialData(pressure=1.0, saturation=0.3),
    )
