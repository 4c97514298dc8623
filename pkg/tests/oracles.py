"""Cell-centred backward-Euler references on a single uniform subdomain.

These march one time step at a time with two-point transmissibilities and share
no assembly code with the package, so a slab solve with one level per slab must
reproduce them.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.optimize import root

from stevmfe.models import (
    BoundaryKind,
    ModelProblem,
    WellKind,
    brooks_corey,
    density,
    manufactured_solution,
    van_genuchten_pc,
)
from stevmfe.stmesh import AXIS_NAMES, MeshSpec

FloatArray = npt.NDArray[np.float64]
ResidualFunction = Callable[[FloatArray], FloatArray]


@dataclass(frozen=True)
class Connection:
    """Two neighbouring cells and the face area between them."""

    first: int
    second: int
    axis: int
    area: float


@dataclass(frozen=True)
class BoundaryFace:
    """A cell side on the outer boundary."""

    cell: int
    axis: int
    name: str
    area: float
    centre: tuple[float, ...]


@dataclass(frozen=True)
class Grid:
    """Geometry of a single-subdomain mesh."""

    cells: tuple[int, ...]
    n_cells: int
    dim: int
    h: tuple[float, ...]
    volume: float
    centres: FloatArray
    permeability: FloatArray
    porosity: FloatArray
    connections: list[Connection]
    boundary: list[BoundaryFace]
    dt: float

    def cell(self, index: tuple[int, ...]) -> int:
        flat, stride = 0, 1
        for i, n in zip(index, self.cells, strict=True):
            flat += i * stride
            stride *= n
        return flat


def grid_of(spec: MeshSpec) -> Grid:
    """Cell-centred geometry of a one-subdomain mesh spec."""
    (sub,) = spec.subdomains
    dim = sub.dim
    h = sub.h
    indices = sub.cell_indices()
    connections = []
    boundary = []
    for index in indices:
        cell = sub.flat_index(index)
        centre = sub.cell_centre(index)
        for axis in range(dim):
            area = spec.thickness * float(np.prod([h[t] for t in range(dim) if t != axis]))
            if index[axis] + 1 < sub.cells[axis]:
                neighbour = list(index)
                neighbour[axis] += 1
                connections.append(Connection(cell, sub.flat_index(tuple(neighbour)), axis, area))
            sides = (("low", index[axis] == 0, -0.5), ("high", index[axis] == sub.cells[axis] - 1, 0.5))
            for side, at_edge, offset in sides:
                if at_edge:
                    face_centre = list(centre)
                    face_centre[axis] += offset * h[axis]
                    boundary.append(BoundaryFace(cell, axis, f"{AXIS_NAMES[axis]}_{side}", area, tuple(face_centre)))
    return Grid(
        cells=sub.cells,
        n_cells=sub.n_cells,
        dim=dim,
        h=h,
        volume=float(np.prod(h)) * spec.thickness,
        centres=np.array([sub.cell_centre(index) for index in indices]),
        permeability=sub.permeability,
        porosity=sub.porosity,
        connections=connections,
        boundary=boundary,
        dt=sub.dt,
    )


def _pair_transmissibility(grid: Grid, link: Connection, coeff: FloatArray) -> float:
    h = grid.h[link.axis]
    return 2.0 * link.area / (h / coeff[link.first] + h / coeff[link.second])


def _boundary_transmissibility(grid: Grid, face: BoundaryFace, coeff: FloatArray) -> float:
    return face.area * coeff[face.cell] / (0.5 * grid.h[face.axis])


def linear_march(problem: ModelProblem, spec: MeshSpec, steps: int, initial: FloatArray) -> list[FloatArray]:
    """Backward-Euler pressures of the linear parabolic model, one array per step."""
    grid = grid_of(spec)
    dt, volume = grid.dt, grid.volume
    mobility = problem.units.darcy_factor * grid.permeability / problem.water.viscosity
    c1 = problem.forcing.c1 if problem.forcing is not None else None
    pressure = initial.copy()
    history = []
    for step in range(steps):
        t_mid = (step + 0.5) * dt
        matrix = np.diag(np.full(grid.n_cells, volume))
        rhs = volume * pressure
        for link in grid.connections:
            t = dt * _pair_transmissibility(grid, link, mobility[:, link.axis])
            i, j = link.first, link.second
            matrix[i, i] += t
            matrix[j, j] += t
            matrix[i, j] -= t
            matrix[j, i] -= t
        for face in grid.boundary:
            if problem.boundary_condition(face.name).kind is not BoundaryKind.DIRICHLET:
                continue
            t = dt * _boundary_transmissibility(grid, face, mobility[:, face.axis])
            matrix[face.cell, face.cell] += t
            rhs[face.cell] += t * problem.dirichlet_value(face.name, face.centre, t_mid)
        source = np.full(grid.n_cells, problem.source)
        if c1 is not None:
            source = source + manufactured_solution(grid.centres[:, 0], grid.centres[:, 1], t_mid, c1)[1]
        rhs = rhs + dt * volume * source
        for well in problem.wells:
            cell = grid.cell(well.index)
            if well.kind is WellKind.INJECTOR:
                rhs[cell] += dt * well.rate * problem.units.rate_factor
            else:
                productivity = dt * (well.well_index or 0.0) / problem.water.viscosity
                matrix[cell, cell] += productivity
                rhs[cell] += productivity * well.bottom_hole_pressure
        pressure = np.linalg.solve(matrix, rhs)
        history.append(pressure.reshape(-1, 1))
    return history


def _difference_jacobian(residual: ResidualFunction, x: FloatArray, r: FloatArray) -> FloatArray:
    columns = []
    for k in range(x.size):
        h = 1e-7 * max(1.0, abs(float(x[k])))
        shifted = x.copy()
        shifted[k] += h
        columns.append((residual(shifted) - r) / h)
    return np.column_stack(columns)


def _solve(residual: ResidualFunction, guess: FloatArray) -> FloatArray:
    result = root(residual, guess, method="hybr", options={"xtol": 1e-13})
    assert result.success, result.message
    x = np.asarray(result.x, dtype=np.float64)
    # Polish with difference-Jacobian Newton steps down to round-off.
    for _ in range(3):
        r = residual(x)
        x = x - np.linalg.solve(_difference_jacobian(residual, x, r), r)
    return x


def tracer_march(problem: ModelProblem, spec: MeshSpec, steps: int, initial: FloatArray) -> list[FloatArray]:
    """Backward-Euler (p, c) of the slightly compressible tracer model."""
    grid = grid_of(spec)
    n, dt = grid.n_cells, grid.dt
    water = problem.water
    mu = water.viscosity
    darcy = problem.units.darcy_factor * grid.permeability
    diffusive = problem.diffusion * grid.porosity
    pore = grid.volume * grid.porosity
    state = initial.copy()
    history = []
    for step in range(steps):
        t_mid = (step + 0.5) * dt
        p_old, c_old = state[:, 0], state[:, 1]
        rho_old = density(p_old, water)

        def residual(
            x: FloatArray, rho_old: FloatArray = rho_old, c_old: FloatArray = c_old, t_mid: float = t_mid
        ) -> FloatArray:
            p, c = x[:n], x[n:]
            rho = density(p, water)
            mass = pore * (rho - rho_old)
            tracer = pore * (rho * c - rho_old * c_old)
            for link in grid.connections:
                i, j = link.first, link.second
                rho_mean = 0.5 * (rho[i] + rho[j])
                flux = dt * rho_mean / mu * _pair_transmissibility(grid, link, darcy[:, link.axis]) * (p[i] - p[j])
                spread = dt * rho_mean * _pair_transmissibility(grid, link, diffusive) * (c[i] - c[j])
                carried = flux * (c[i] if flux > 0 else c[j]) + spread
                mass[i] += flux
                mass[j] -= flux
                tracer[i] += carried
                tracer[j] -= carried
            for face in grid.boundary:
                condition = problem.boundary_condition(face.name)
                if condition.kind is not BoundaryKind.DIRICHLET:
                    continue
                i = face.cell
                g = problem.dirichlet_value(face.name, face.centre, t_mid)
                out = dt * rho[i] / mu * _boundary_transmissibility(grid, face, darcy[:, face.axis]) * (p[i] - g)
                mass[i] += out
                tracer[i] += out * (c[i] if out > 0 else condition.concentration)
            for well in problem.wells:
                i = grid.cell(well.index)
                if well.kind is WellKind.INJECTOR:
                    injected = dt * well.rate * problem.units.rate_factor * water.reference_density
                    mass[i] -= injected
                    tracer[i] -= injected * well.concentration
                else:
                    produced = dt * (well.well_index or 0.0) * rho[i] / mu * (p[i] - well.bottom_hole_pressure)
                    mass[i] += produced
                    tracer[i] += produced * c[i]
            return np.concatenate([mass, tracer])

        x = _solve(residual, np.concatenate([p_old, c_old]))
        state = np.column_stack([x[:n], x[n:]])
        history.append(state)
    return history


def two_phase_march(problem: ModelProblem, spec: MeshSpec, steps: int, initial: FloatArray) -> list[FloatArray]:
    """Backward-Euler (p_o, s_w) of the two-phase model with no-flow boundaries."""
    grid = grid_of(spec)
    n, dt = grid.n_cells, grid.dt
    oil, water, relperm = problem.oil_props, problem.water, problem.relperm
    darcy = problem.units.darcy_factor * grid.permeability
    pore = grid.volume * grid.porosity

    def capillary(s: FloatArray) -> FloatArray:
        if problem.capillary is None:
            return np.zeros_like(s)
        return van_genuchten_pc(s, problem.capillary, relperm.s_wirr)

    state = initial.copy()
    history = []
    for _ in range(steps):
        p_old, s_old = state[:, 0], state[:, 1]
        rho_w_old = density(p_old - capillary(s_old), water)
        total_old = rho_w_old * s_old + density(p_old, oil) * (1.0 - s_old)
        water_old = rho_w_old * s_old

        def residual(x: FloatArray, total_old: FloatArray = total_old, water_old: FloatArray = water_old) -> FloatArray:
            p, s = x[:n], x[n:]
            p_w = p - capillary(s)
            rho_o, rho_w = density(p, oil), density(p_w, water)
            krw, kro = brooks_corey(s, relperm)
            total = pore * (rho_w * s + rho_o * (1.0 - s) - total_old)
            water_mass = pore * (rho_w * s - water_old)
            for link in grid.connections:
                i, j = link.first, link.second
                t = dt * _pair_transmissibility(grid, link, darcy[:, link.axis])
                aux_o = t * (p[i] - p[j])
                aux_w = t * (p_w[i] - p_w[j])
                flux_o = (rho_o[i] + rho_o[j]) / (2.0 * oil.viscosity) * (kro[i] if aux_o > 0 else kro[j]) * aux_o
                flux_w = (rho_w[i] + rho_w[j]) / (2.0 * water.viscosity) * (krw[i] if aux_w > 0 else krw[j]) * aux_w
                total[i] += flux_o + flux_w
                total[j] -= flux_o + flux_w
                water_mass[i] += flux_w
                water_mass[j] -= flux_w
            for well in problem.wells:
                i = grid.cell(well.index)
                if well.kind is WellKind.INJECTOR:
                    injected = dt * well.rate * problem.units.rate_factor * water.reference_density
                    total[i] -= injected
                    water_mass[i] -= injected
                else:
                    drawdown = dt * (well.well_index or 0.0) * (p[i] - well.bottom_hole_pressure)
                    produced_o = drawdown * rho_o[i] * kro[i] / oil.viscosity
                    produced_w = drawdown * rho_w[i] * krw[i] / water.viscosity
                    total[i] += produced_o + produced_w
                    water_mass[i] += produced_w
            return np.concatenate([total, water_mass])

        x = _solve(residual, np.concatenate([p_old, s_old]))
        state = np.column_stack([x[:n], x[n:]])
        history.append(state)
    return history
