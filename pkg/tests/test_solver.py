"""Tests for flux elimination, the Newton slab solve and the time march."""

from collections.abc import Callable
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from stevmfe.assembly import SlabSystem, build_operators, residual_and_jacobian
from stevmfe.errors import EliminationError, NonConvergenceError
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
    van_genuchten_pc,
    van_genuchten_pc_derivative,
    van_genuchten_saturation,
)
from stevmfe.solver import (
    SolverSettings,
    advance,
    limit_saturation_update,
    newton_solve_slab,
    recover_fluxes,
    relax_fluxes,
    schur_reduce,
    solve_reduced,
)
from stevmfe.stmesh import MeshSpec, SpaceTimeMesh, Subdomain, build_mesh
from tests.helpers import (
    FloatArray,
    dofs_for,
    linear_problem,
    pack,
    single_block_spec,
    tracer_problem,
    two_block_mesh,
    two_phase_problem,
)
from tests.oracles import linear_march, tracer_march, two_phase_march

TIGHT = SolverSettings(tolerance=1e-12, max_iterations=30)


def _toy_system(a_uu: FloatArray, a_pp: FloatArray, n_faces: int, n_families: int = 1) -> SlabSystem:
    n_flux, n_cell = a_uu.shape[0], a_pp.shape[0]
    rng = np.random.default_rng(7)
    return SlabSystem(
        a_uu=sp.csr_matrix(a_uu),
        a_up=sp.csr_matrix(rng.uniform(-1.0, 1.0, (n_flux, n_cell))),
        a_pu=sp.csr_matrix(rng.uniform(-1.0, 1.0, (n_cell, n_flux))),
        a_pp=sp.csr_matrix(a_pp),
        r_u=rng.uniform(-1.0, 1.0, n_flux),
        r_p=rng.uniform(-1.0, 1.0, n_cell),
        n_faces=n_faces,
        n_families=n_families,
        n_elements=n_cell,
        n_fields=1,
        upwind=np.zeros((n_faces, 0), dtype=bool),
    )


def _heterogeneous_spec() -> MeshSpec:
    """10x10 cells, ten steps of 0.125."""
    permeability = np.column_stack([np.linspace(0.5, 3.0, 100), np.linspace(2.0, 0.7, 100)])
    return single_block_spec(cells=(10, 10), dt=0.125, t_end=1.25, permeability=permeability)


def test_schur_reduce_matches_dense_solve() -> None:
    """Test elimination plus back-substitution solves the full Newton system."""
    problem = tracer_problem()
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)
    rng = np.random.default_rng(3)
    cells = np.column_stack([rng.uniform(0.8, 1.2, mesh.n_elements), rng.uniform(0.0, 1.0, mesh.n_elements)])
    fluxes = rng.uniform(-0.5, 0.5, (mesh.n_faces, 2))
    previous = np.column_stack([np.ones(mesh.n_cells), np.zeros(mesh.n_cells)])
    system = residual_and_jacobian(problem, mesh, dofmap, cells, fluxes, previous)

    reduced = schur_reduce(system)
    delta_cells, nonzeros, seconds = solve_reduced(reduced)
    delta_fluxes = recover_fluxes(reduced, delta_cells)

    dense = np.linalg.solve(system.jacobian().toarray(), -system.residual())
    np.testing.assert_allclose(np.concatenate([delta_cells, delta_fluxes]), dense, rtol=1e-10, atol=1e-12)
    assert reduced.size == dofmap.n_cell_unknowns
    assert nonzeros == reduced.matrix.nnz
    assert seconds >= 0.0


def test_schur_reduce_identity_blocks() -> None:
    """Test S = A - I when every other block is the identity."""
    a = np.array([[4.0, 1.0, 0.0], [1.0, 5.0, 2.0], [0.0, 2.0, 6.0]])
    identity = sp.identity(3, format="csr")
    system = SlabSystem(
        a_uu=identity,
        a_up=identity,
        a_pu=identity,
        a_pp=sp.csr_matrix(a),
        r_u=np.array([1.0, 2.0, 3.0]),
        r_p=np.array([0.5, 0.0, -0.5]),
        n_faces=3,
        n_families=1,
        n_elements=3,
        n_fields=1,
        upwind=np.zeros((3, 0), dtype=bool),
    )

    reduced = schur_reduce(system)

    np.testing.assert_allclose(reduced.matrix.toarray(), a - np.eye(3))
    np.testing.assert_allclose(reduced.rhs, [0.5, 2.0, 3.5])


def test_schur_reduce_lower_triangular_face_blocks() -> None:
    """Test multi-family face blocks are inverted exactly."""
    # Two faces, two families: rows f, n_faces + f.
    a_uu = np.array(
        [
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 3.0, 0.0, 0.0],
            [-1.5, 0.0, 1.0, 0.0],
            [0.0, 0.5, 0.0, 4.0],
        ]
    )
    system = _toy_system(a_uu, np.diag([10.0, 11.0, 12.0]), n_faces=2, n_families=2)

    reduced = schur_reduce(system)

    np.testing.assert_allclose(reduced.inverse.toarray(), np.linalg.inv(a_uu), atol=1e-14)


def test_schur_reduce_zero_pivot_names_face() -> None:
    """Test a zero diagonal entry in a face block is reported with its face."""
    system = _toy_system(np.diag([1.0, 0.0, 2.0]), np.eye(2), n_faces=3)

    with pytest.raises(EliminationError, match="face 1"):
        schur_reduce(system)


def test_schur_reduce_rejects_cross_face_coupling() -> None:
    """Test a flux block coupling two faces cannot be eliminated face by face."""
    a_uu = np.eye(3)
    a_uu[0, 2] = 0.5
    system = _toy_system(a_uu, np.eye(2), n_faces=3)

    with pytest.raises(EliminationError, match="couples face 0 to face 2"):
        schur_reduce(system)


def _one_dimensional_pair() -> tuple[ModelProblem, SpaceTimeMesh]:
    spec = MeshSpec(
        origin=(0.0,),
        extent=(2.0,),
        t_end=1.0,
        subdomains=(Subdomain.uniform(0, (0.0,), (2.0,), (2,), 1.0),),
    )
    return ModelProblem(kind=ModelKind.LINEAR_PARABOLIC), build_mesh(spec)


def test_recover_fluxes_pressure_jump() -> None:
    """Test a unit pressure update on the left cell drives a unit interior flux."""
    problem, mesh = _one_dimensional_pair()
    dofmap = dofs_for(problem, mesh)
    system = residual_and_jacobian(
        problem, mesh, dofmap, np.zeros((2, 1)), np.zeros((mesh.n_faces, 1)), np.zeros((2, 1))
    )

    delta_fluxes = recover_fluxes(schur_reduce(system), np.array([1.0, 0.0]))

    interior = next(face.id for face in mesh.faces if face.left is not None and face.right is not None)
    assert delta_fluxes[interior] == pytest.approx(1.0)
    assert np.count_nonzero(delta_fluxes) == 1


def test_recover_fluxes_uniform_pressure() -> None:
    """Test a uniform pressure update moves no flux."""
    problem, mesh = _one_dimensional_pair()
    dofmap = dofs_for(problem, mesh)
    system = residual_and_jacobian(
        problem, mesh, dofmap, np.zeros((2, 1)), np.zeros((mesh.n_faces, 1)), np.zeros((2, 1))
    )

    np.testing.assert_array_equal(recover_fluxes(schur_reduce(system), np.array([3.0, 3.0])), 0.0)


def test_linear_slab_converges_in_one_iteration() -> None:
    """Test a linear problem needs exactly one Newton update per slab."""
    problem = linear_problem()
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)

    state = advance(problem, mesh, dofmap, SolverSettings(tolerance=1e-9))

    assert state.slab == mesh.n_slabs == 2
    for report in state.reports:
        assert report.converged
        assert report.iterations == 1
        assert len(report.residual_norms) == 2
        assert len(report.nonzeros) == 1


def test_linear_matches_backward_euler_oracle() -> None:
    """Test one level per slab reproduces cell-centred backward Euler with wells and Dirichlet data."""
    spec = _heterogeneous_spec()
    problem = replace(
        linear_problem(source=0.4),
        wells=(
            WellSpec(name="inj", subdomain=0, index=(0, 0), kind=WellKind.INJECTOR, rate=0.3),
            WellSpec(
                name="prod",
                subdomain=0,
                index=(2, 2),
                kind=WellKind.PRODUCER,
                bottom_hole_pressure=-0.2,
                well_index=0.7,
            ),
        ),
    )
    mesh = build_mesh(spec)

    state = advance(problem, mesh, dofs_for(problem, mesh), TIGHT)
    expected = linear_march(problem, spec, mesh.n_slabs, state.initial)

    for solution, reference in zip(state.slabs, expected, strict=True):
        np.testing.assert_allclose(solution.cells, reference, rtol=1e-10, atol=1e-11)


def test_tracer_matches_backward_euler_oracle() -> None:
    """Test the tracer model against an independent cell-centred solve."""
    spec = _heterogeneous_spec()
    problem = tracer_problem(producer=(0, (3, 2)))
    mesh = build_mesh(spec)

    state = advance(problem, mesh, dofs_for(problem, mesh), TIGHT)
    expected = tracer_march(problem, spec, mesh.n_slabs, state.initial)

    for solution, reference in zip(state.slabs, expected, strict=True):
        np.testing.assert_allclose(solution.cells, reference, rtol=1e-10, atol=1e-11)


@pytest.mark.parametrize("capillary", [True, False])
def test_two_phase_matches_backward_euler_oracle(capillary: bool) -> None:
    """Test the two-phase model against an independent cell-centred solve."""
    spec = _heterogeneous_spec()
    problem = two_phase_problem(capillary=capillary, producer=(0, (3, 2)))
    mesh = build_mesh(spec)

    state = advance(
        problem, mesh, dofs_for(problem, mesh), SolverSettings.for_model(problem.kind, 1e-12, max_iterations=30)
    )
    expected = two_phase_march(problem, spec, mesh.n_slabs, state.initial)

    for solution, reference in zip(state.slabs, expected, strict=True):
        np.testing.assert_allclose(solution.cells, reference, rtol=1e-10, atol=1e-11)


def test_equilibrium_converges_in_one_iteration() -> None:
    """Test a two-phase state at rest stays put after a single update."""
    problem = two_phase_problem(wells=False)
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)
    previous = np.column_stack([np.full(mesh.n_cells, 1.0), np.full(mesh.n_cells, 0.3)])

    solution = newton_solve_slab(problem, mesh, dofmap, previous, 0)

    assert solution.report.iterations == 1
    np.testing.assert_allclose(solution.cells, previous[mesh.arrays.el_cell], atol=1e-12)
    np.testing.assert_allclose(solution.fluxes, 0.0, atol=1e-12)


def test_constant_trajectory_without_forcing() -> None:
    """Test a uniform linear state without wells or boundary data never changes."""
    problem = replace(linear_problem(dirichlet=False, wells=False), initial=InitialData(pressure=4.0))
    mesh = two_block_mesh(t_end=3.0)

    state = advance(problem, mesh, dofs_for(problem, mesh))

    assert state.slab == 3
    np.testing.assert_allclose(state.current, 4.0)
    for solution in state.slabs:
        np.testing.assert_allclose(solution.cells, 4.0)


def test_advance_is_deterministic() -> None:
    """Test two identical runs give bit-identical trajectories."""
    problem = tracer_problem()
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)

    first = advance(problem, mesh, dofmap, TIGHT)
    second = advance(problem, mesh, dofmap, TIGHT)

    for a, b in zip(first.slabs, second.slabs, strict=True):
        np.testing.assert_array_equal(a.cells, b.cells)
        np.testing.assert_array_equal(a.fluxes, b.fluxes)


def test_advance_calls_back_after_each_slab() -> None:
    """Test the slab callback sees every committed slab in order."""
    problem = linear_problem()
    mesh = two_block_mesh()
    seen: list[int] = []

    advance(problem, mesh, dofs_for(problem, mesh), on_slab=lambda state, solution: seen.append(solution.slab))

    assert seen == [0, 1]


def test_iteration_cap_raises_with_slab_and_report() -> None:
    """Test exceeding the iteration cap raises with the failing slab and its history."""
    problem = tracer_problem()
    mesh = two_block_mesh()

    with pytest.raises(NonConvergenceError) as excinfo:
        advance(problem, mesh, dofs_for(problem, mesh), SolverSettings(tolerance=1e-16, max_iterations=1))

    assert excinfo.value.slab == 0
    assert excinfo.value.report.iterations == 1
    assert not excinfo.value.report.converged
    assert len(excinfo.value.report.residual_norms) == 2


def test_conforming_split_matches_single_domain() -> None:
    """Test two matching blocks reproduce the single-block tracer solution."""
    split = MeshSpec(
        origin=(0.0, 0.0),
        extent=(2.0, 1.0),
        t_end=1.0,
        subdomains=(
            Subdomain.uniform(0, (0.0, 0.0), (1.0, 1.0), (2, 2), 0.5),
            Subdomain.uniform(1, (1.0, 0.0), (1.0, 1.0), (2, 2), 0.5),
        ),
    )
    whole = single_block_spec(cells=(4, 2), extent=(2.0, 1.0), dt=0.5, t_end=1.0)
    split_problem = tracer_problem(producer=(1, (1, 1)))
    whole_problem = replace(
        split_problem,
        wells=(split_problem.wells[0], replace(split_problem.wells[1], subdomain=0, index=(3, 1))),
    )

    results = []
    for problem, spec in ((split_problem, split), (whole_problem, whole)):
        mesh = build_mesh(spec)
        state = advance(problem, mesh, dofs_for(problem, mesh), TIGHT)
        order = np.lexsort(mesh.arrays.cell_centre.T[::-1])
        results.append(state.current[order])

    np.testing.assert_allclose(results[0], results[1], rtol=1e-8, atol=1e-10)


def _three_block_spec(
    fine_cells: int, fine_size: float, coarse_x: int, width: float, height: float, dt_fine: float, ratio: int
) -> MeshSpec:
    """Fine square in the lower-left corner, coarse blocks to its right and above."""
    coarse_h = fine_size
    return MeshSpec(
        origin=(0.0, 0.0),
        extent=(width, height),
        t_end=2 * ratio * dt_fine,
        subdomains=(
            Subdomain.uniform(0, (0.0, 0.0), (fine_size, fine_size), (fine_cells, fine_cells), dt_fine),
            Subdomain.uniform(
                1,
                (fine_size, 0.0),
                (width - fine_size, height),
                (coarse_x, round(height / coarse_h)),
                ratio * dt_fine,
            ),
            Subdomain.uniform(
                2,
                (0.0, fine_size),
                (fine_size, height - fine_size),
                (1, round((height - fine_size) / coarse_h)),
                ratio * dt_fine,
            ),
        ),
    )


def test_tracer_desk_run_bounds_and_balance() -> None:
    """Test a tracer slug through a refined corner stays within [0, 1] and conserves mass."""
    spec = _three_block_spec(10, 10.0, 10, 110.0, 30.0, 1.0, 5)
    problem = ModelProblem(
        kind=ModelKind.SINGLE_PHASE_TRACER,
        water=FluidProps(reference_density=1.0, reference_pressure=0.0, compressibility=1e-3, viscosity=1.0),
        diffusion=1e-3,
        wells=(
            WellSpec(name="inj", subdomain=0, index=(0, 0), kind=WellKind.INJECTOR, rate=2.0, concentration=1.0),
            WellSpec(
                name="prod",
                subdomain=1,
                index=(9, 2),
                kind=WellKind.PRODUCER,
                bottom_hole_pressure=0.0,
                well_index=5.0,
            ),
        ),
        initial=InitialData(pressure=0.0, concentration=0.0),
    )
    mesh = build_mesh(spec)

    state = advance(problem, mesh, dofs_for(problem, mesh), SolverSettings(tolerance=1e-9, max_iterations=30))

    assert state.slab == 2
    for solution in state.slabs:
        c = solution.cells[:, 1]
        assert c.min() >= -1e-8
        assert c.max() <= 1.0 + 1e-8
        for record in solution.balance:
            assert abs(record.imbalance) <= 1e-5 * max(abs(record.well_net), 1.0)
    injector_cell = mesh.arrays.el_cell[mesh.element_id(0, (0, 0), 0)]
    assert state.current[injector_cell, 1] > 0.5


def test_operators_are_reusable_across_slabs() -> None:
    """Test supplying precomputed operators changes nothing."""
    problem = tracer_problem()
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)
    previous = np.column_stack([np.ones(mesh.n_cells), np.zeros(mesh.n_cells)])

    built = newton_solve_slab(problem, mesh, dofmap, previous, 0, TIGHT)
    shared = newton_solve_slab(problem, mesh, dofmap, previous, 0, TIGHT, operators=build_operators(problem, mesh))

    np.testing.assert_array_equal(built.cells, shared.cells)


def test_dirichlet_only_linear_steady_state() -> None:
    """Test equal Dirichlet data on both x sides hold a uniform pressure."""
    problem = ModelProblem(
        kind=ModelKind.LINEAR_PARABOLIC,
        boundary={
            "x_low": BoundaryCondition(kind=BoundaryKind.DIRICHLET, value=2.0),
            "x_high": BoundaryCondition(kind=BoundaryKind.DIRICHLET, value=2.0),
        },
        initial=InitialData(pressure=2.0),
    )
    mesh = two_block_mesh()

    state = advance(problem, mesh, dofs_for(problem, mesh))

    np.testing.assert_allclose(state.current, 2.0, atol=1e-12)
    x = pack(state.slabs[-1].cells, state.slabs[-1].fluxes)
    np.testing.assert_allclose(x[mesh.n_elements :], 0.0, atol=1e-12)


def _capillary_problem() -> ModelProblem:
    return ModelProblem(kind=ModelKind.TWO_PHASE, oil=FluidProps(viscosity=3.0), capillary=CapillaryParams())


def test_limit_saturation_update_leaves_capped_branch_in_stages() -> None:
    """Test a cell at irreducible water may only cut its capillary pressure by the configured factor."""
    problem = _capillary_problem()
    settings = SolverSettings.for_model(problem.kind)
    assert settings.capillary_factor is not None
    cap = float(van_genuchten_pc(0.2, CapillaryParams()))

    updated = limit_saturation_update(problem, np.array([0.2]), np.array([0.3]), settings)

    expected = van_genuchten_saturation(cap / settings.capillary_factor, CapillaryParams())
    np.testing.assert_allclose(updated, expected, rtol=1e-12)
    assert 0.2 < updated[0] < 0.201


def test_limit_saturation_update_lets_dry_cells_compress() -> None:
    """Test a small decrease below irreducible water passes through unchanged."""
    problem = _capillary_problem()
    settings = SolverSettings.for_model(problem.kind)

    updated = limit_saturation_update(problem, np.array([0.2]), np.array([-1e-5]), settings)

    np.testing.assert_allclose(updated, [0.2 - 1e-5], rtol=1e-14)


def test_limit_saturation_update_steep_branch_moves_capillary_pressure() -> None:
    """Test near irreducible water the update is applied to p_c and mapped back to saturation."""
    problem = _capillary_problem()
    s, step = np.array([0.21]), np.array([1e-3])
    params = CapillaryParams()

    updated = limit_saturation_update(problem, s, step, SolverSettings.for_model(problem.kind))

    pc = van_genuchten_pc(s, params) + van_genuchten_pc_derivative(s, params) * step
    np.testing.assert_allclose(updated, van_genuchten_saturation(pc, params), rtol=1e-12)


@pytest.mark.parametrize(
    ("capillary", "saturation", "step", "expected"),
    [
        (True, 0.5, 0.05, 0.55),
        (True, 0.5, 0.6, 0.7),
        (False, 0.2, 0.5, 0.4),
        (False, 0.6, -0.1, 0.5),
    ],
)
def test_limit_saturation_update_clamps_wet_cells(
    capillary: bool, saturation: float, step: float, expected: float
) -> None:
    """Test away from irreducible water only the saturation clamp applies."""
    problem = _capillary_problem() if capillary else ModelProblem(kind=ModelKind.TWO_PHASE, oil=FluidProps())

    updated = limit_saturation_update(
        problem, np.array([saturation]), np.array([step]), SolverSettings.for_model(problem.kind)
    )

    np.testing.assert_allclose(updated, [expected], rtol=1e-12)


@pytest.mark.parametrize(("factory", "sweeps"), [(tracer_problem, 1), (two_phase_problem, 2)])
def test_relax_fluxes_satisfies_flux_rows(factory: Callable[[], ModelProblem], sweeps: int) -> None:
    """Test relaxation zeroes the flux rows at fixed cell values; upwind flips need a second sweep."""
    problem = factory()
    mesh = two_block_mesh()
    dofmap = dofs_for(problem, mesh)
    rng = np.random.default_rng(11)
    cells = np.column_stack([rng.uniform(0.8, 1.2, mesh.n_elements), rng.uniform(0.3, 0.7, mesh.n_elements)])
    previous = np.column_stack([np.ones(mesh.n_cells), np.full(mesh.n_cells, 0.5)])
    fluxes = np.zeros((mesh.n_faces, len(dofmap.families)))

    system = residual_and_jacobian(problem, mesh, dofmap, cells, fluxes, previous)
    for _ in range(sweeps):
        fluxes = relax_fluxes(system, fluxes)
        system = residual_and_jacobian(problem, mesh, dofmap, cells, fluxes, previous)

    np.testing.assert_allclose(system.r_u, 0.0, atol=1e-12)


def test_two_phase_from_irreducible_water_with_capillary_pressure() -> None:
    """Test injection into a reservoir at irreducible water converges with capillary pressure on."""
    base = two_phase_problem()
    problem = replace(
        base,
        water=replace(base.water, compressibility=1e-4),
        initial=InitialData(pressure=1.0, saturation=0.2),
    )
    mesh = two_block_mesh()

    state = advance(problem, mesh, dofs_for(problem, mesh), SolverSettings.for_model(problem.kind))

    assert all(report.converged for report in state.reports)
    assert max(report.iterations for report in state.reports) <= 20
    s = state.current[:, 1]
    assert s.min() >= 0.2 - 1e-3
    assert s.max() <= 0.8 + 1e-8
    injector = mesh.arrays.el_cell[mesh.element_id(0, (0, 0), 0)]
    assert state.current[injector, 1] > 0.2
