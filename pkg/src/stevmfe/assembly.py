"""Slab residual and Jacobian assembly.

The slab system is kept in four sparse blocks so the solver can eliminate the
flux unknowns face by face::

    [ A_uu  A_up ] [du]   [r_u]
    [ A_pu  A_pp ] [dp] = [r_p]   (solved for -r)

Flux rows come family-major (``family * n_faces + face``) and cell rows
field-major (``field * n_elements + element``), matching ``DofMap``.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from stevmfe.errors import AssemblyError, ConfigurationError
from stevmfe.models import (
    BoundaryKind,
    ModelKind,
    ModelProblem,
    WellSpec,
    brooks_corey,
    brooks_corey_derivatives,
    density,
    density_derivative,
    manufactured_solution,
    peaceman_well_index,
    upwind_concentration,
    upwind_mobility,
    van_genuchten_pc,
    van_genuchten_pc_derivative,
    well_contribution,
)
from stevmfe.stdisc import accumulation_row, divergence_matrix, face_mass_coefficients, source_vector
from stevmfe.stmesh import FACE_KIND_CODES, NO_ELEMENT, DofMap, FaceKind, SpaceTimeMesh

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]


def _selector(rows: IntArray, cols: IntArray, n_rows: int, n_cols: int) -> sp.csr_matrix:
    """0/1 matrix picking column ``cols[i]`` into row ``rows[i]``."""
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_rows, n_cols))


def _diag(values: FloatArray) -> sp.csr_matrix:
    return sp.diags(np.asarray(values, dtype=np.float64), format="csr")


@dataclass(frozen=True)
class CompletedWell:
    """A well resolved to its elements and well index."""

    spec: WellSpec
    elements: tuple[int, ...]
    well_index: float


@dataclass(frozen=True, eq=False)
class SlabOperators:
    """Problem-dependent operators shared by every slab and Newton iteration."""

    divergence: sp.csr_matrix
    left: sp.csr_matrix
    right: sp.csr_matrix
    previous: sp.csr_matrix
    interior: BoolArray
    dirichlet: BoolArray
    boundary_names: tuple[str | None, ...]
    boundary_outward: FloatArray
    wells: tuple[CompletedWell, ...]

    @property
    def darcy_active(self) -> BoolArray:
        """Faces whose Darcy row is a real constitutive relation."""
        return np.asarray(self.interior | self.dirichlet)


def _complete_wells(problem: ModelProblem, mesh: SpaceTimeMesh) -> tuple[CompletedWell, ...]:
    completed = []
    for well in problem.wells:
        try:
            sub = mesh.subdomain(well.subdomain)
        except KeyError as exc:
            msg = f"model.wells.{well.name}: unknown subdomain {well.subdomain}"
            raise ConfigurationError(msg) from exc
        if len(well.index) != sub.dim or any(not 0 <= i < n for i, n in zip(well.index, sub.cells, strict=True)):
            msg = f"model.wells.{well.name}: cell {well.index} outside subdomain {sub.id} with {sub.cells} cells"
            raise ConfigurationError(msg)
        flat = sub.flat_index(well.index)
        well_index = peaceman_well_index(
            well, sub.permeability[flat], np.asarray(sub.h), mesh.thickness, problem.units
        )
        elements = tuple(mesh.element_id(sub.id, well.index, level) for level in range(mesh.levels(sub.id)))
        completed.append(CompletedWell(spec=well, elements=elements, well_index=well_index))
        logger.debug("Well %s completed in %d elements with WI %g", well.name, len(elements), well_index)
    return tuple(completed)


def build_operators(problem: ModelProblem, mesh: SpaceTimeMesh) -> SlabOperators:
    """Precompute the incidence, selection and boundary data of a problem on a mesh.

    Raises:
        ConfigurationError: If a well is misplaced or the two-phase model is
            given a Dirichlet side.
    """
    arrays = mesh.arrays
    n_el, n_faces = mesh.n_elements, mesh.n_faces
    faces = np.arange(n_faces)
    has_left = arrays.face_left != NO_ELEMENT
    has_right = arrays.face_right != NO_ELEMENT
    boundary = arrays.face_kind == FACE_KIND_CODES[FaceKind.BOUNDARY]

    names = [face.boundary_name for face in mesh.faces]
    dirichlet = np.zeros(n_faces, dtype=bool)
    for f, name in enumerate(names):
        if name is None:
            continue
        dirichlet[f] = problem.boundary_condition(name).kind is BoundaryKind.DIRICHLET
    if problem.kind is ModelKind.TWO_PHASE and dirichlet.any():
        msg = "model.boundary: the two_phase model supports no_flow sides only"
        raise ConfigurationError(msg)

    in_slab = np.flatnonzero(arrays.el_prev != NO_ELEMENT)
    divergence = divergence_matrix(mesh)
    return SlabOperators(
        divergence=divergence,
        left=_selector(faces[has_left], arrays.face_left[has_left], n_faces, n_el),
        right=_selector(faces[has_right], arrays.face_right[has_right], n_faces, n_el),
        previous=_selector(in_slab, arrays.el_prev[in_slab], n_el, n_el),
        interior=np.asarray(~boundary),
        dirichlet=dirichlet,
        boundary_names=tuple(names),
        boundary_outward=np.asarray(divergence.sum(axis=0)).ravel(),
        wells=_complete_wells(problem, mesh),
    )


@dataclass(frozen=True, eq=False)
class SlabSystem:
    """Residual and Jacobian blocks of one slab at the current iterate."""

    a_uu: sp.csr_matrix
    a_up: sp.csr_matrix
    a_pu: sp.csr_matrix
    a_pp: sp.csr_matrix
    r_u: FloatArray
    r_p: FloatArray
    n_faces: int
    n_families: int
    n_elements: int
    n_fields: int
    upwind: BoolArray

    def residual(self) -> FloatArray:
        """Residual in ``DofMap`` order (cells first)."""
        return np.concatenate([self.r_p, self.r_u])

    def jacobian(self) -> sp.csr_matrix:
        """Full Jacobian in ``DofMap`` order."""
        return sp.bmat([[self.a_pp, self.a_pu], [self.a_up, self.a_uu]], format="csr")


@dataclass
class _Terms:
    """Cell-row contributions collected before wells and sources are added."""

    r_p: list[FloatArray]
    a_pp: list[list[sp.csr_matrix | None]]
    r_u: list[FloatArray]
    a_uu: list[list[sp.csr_matrix | None]]
    a_up: list[list[sp.csr_matrix | None]]
    a_pu: list[list[sp.csr_matrix | None]]
    upwind: BoolArray


def _split(values: FloatArray, count: int) -> list[FloatArray]:
    return [np.asarray(values[:, k], dtype=np.float64) for k in range(count)]


def _previous_values(mesh: SpaceTimeMesh, cells: FloatArray, previous: FloatArray) -> FloatArray:
    """Value at each element's time predecessor: in-slab element or slab-start state."""
    arrays = mesh.arrays
    prev = arrays.el_prev
    in_slab = prev != NO_ELEMENT
    out = previous[arrays.el_cell].copy()
    out[in_slab] = cells[prev[in_slab]]
    return np.asarray(out, dtype=np.float64)


def _accumulation_weight(mesh: SpaceTimeMesh) -> FloatArray:
    """Spatial cell volume of each element: its space-time measure divided by its time step."""
    arrays = mesh.arrays
    return np.asarray(arrays.el_volume, dtype=np.float64)


def _side_values(values: FloatArray, index: IntArray, fallback: FloatArray | float) -> FloatArray:
    safe = np.maximum(index, 0)
    return np.asarray(np.where(index != NO_ELEMENT, values[safe], fallback), dtype=np.float64)


def _source_function(problem: ModelProblem) -> Callable[[FloatArray, FloatArray], FloatArray]:
    c1 = problem.forcing.c1 if problem.forcing is not None else None
    constant = problem.source

    def evaluate(centres: FloatArray, t: FloatArray) -> FloatArray:
        values = np.full(len(t), constant, dtype=np.float64)
        if c1 is not None:
            _, forcing = manufactured_solution(centres[:, 0], centres[:, 1], t, c1)
            values = values + forcing
        return values

    return evaluate


def dirichlet_values(problem: ModelProblem, mesh: SpaceTimeMesh, operators: SlabOperators, slab: int) -> FloatArray:
    """Dirichlet pressure datum at each face's space-time midpoint (zero elsewhere)."""
    values = np.zeros(mesh.n_faces)
    start = mesh.slab_start(slab)
    for f in np.flatnonzero(operators.dirichlet):
        face = mesh.faces[f]
        name = operators.boundary_names[f]
        if name is None:
            continue
        values[f] = problem.dirichlet_value(name, face.centre, start + face.t_mid)
    return values


def _boundary_concentration(problem: ModelProblem, operators: SlabOperators) -> FloatArray:
    return np.array(
        [
            problem.boundary_condition(name).concentration if name is not None and operators.dirichlet[f] else 0.0
            for f, name in enumerate(operators.boundary_names)
        ]
    )


def _advected_concentration(
    problem: ModelProblem, mesh: SpaceTimeMesh, ops: SlabOperators, c: FloatArray, low_side: BoolArray
) -> FloatArray:
    """Upwind concentration per face; inflow through a boundary carries the boundary value."""
    boundary_c = _boundary_concentration(problem, ops)
    c_left = _side_values(c, mesh.arrays.face_left, boundary_c)
    c_right = _side_values(c, mesh.arrays.face_right, boundary_c)
    return upwind_concentration(np.where(low_side, 1.0, -1.0), c_left, c_right)


def _upwind_mask(fluxes: FloatArray, frozen: BoolArray | None, column: int) -> BoolArray:
    if frozen is not None:
        return np.asarray(frozen[:, column], dtype=bool)
    return np.asarray(fluxes > 0)


def _upwind_selector(mesh: SpaceTimeMesh, low_side: BoolArray) -> tuple[IntArray, sp.csr_matrix]:
    arrays = mesh.arrays
    upstream = np.where(low_side, arrays.face_left, arrays.face_right)
    present = np.flatnonzero(upstream != NO_ELEMENT)
    return upstream, _selector(present, upstream[present], mesh.n_faces, mesh.n_elements)


def _linear_terms(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    ops: SlabOperators,
    cells: FloatArray,
    fluxes: FloatArray,
    previous: FloatArray,
    slab: int,
) -> _Terms:
    arrays = mesh.arrays
    p = cells[:, 0]
    flux = fluxes[:, 0]
    active = ops.darcy_active
    coefficient = face_mass_coefficients(
        mesh, problem.units.darcy_factor * arrays.el_perm / problem.water.viscosity
    )
    g = dirichlet_values(problem, mesh, ops, slab)
    p_left = _side_values(p, arrays.face_left, g)
    p_right = _side_values(p, arrays.face_right, g)

    r_u = np.where(active, coefficient * flux - (p_left - p_right), flux)
    a_uu = _diag(np.where(active, coefficient, 1.0))
    a_up = _diag(active.astype(np.float64)) @ (ops.right - ops.left)

    weight = _accumulation_weight(mesh)
    p_prev = _previous_values(mesh, cells, previous)[:, 0]
    r_p = accumulation_row(p, p_prev, weight) + ops.divergence @ flux
    a_pp = _diag(weight) - _diag(weight) @ ops.previous
    return _Terms(
        r_p=[r_p],
        a_pp=[[a_pp]],
        r_u=[r_u],
        a_uu=[[a_uu]],
        a_up=[[a_up.tocsr()]],
        a_pu=[[ops.divergence]],
        upwind=np.zeros((mesh.n_faces, 0), dtype=bool),
    )


def _tracer_terms(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    ops: SlabOperators,
    cells: FloatArray,
    fluxes: FloatArray,
    previous: FloatArray,
    slab: int,
    frozen_upwind: BoolArray | None,
) -> _Terms:
    arrays = mesh.arrays
    water = problem.water
    p, c = _split(cells, 2)
    flux, diffusive = _split(fluxes, 2)
    left, right = arrays.face_left, arrays.face_right
    has_left = left != NO_ELEMENT
    has_right = right != NO_ELEMENT
    darcy_active = ops.darcy_active
    diffusion_active = ops.interior

    rho = density(p, water)
    d_rho = density_derivative(p, water)
    rho_l = _side_values(rho, left, 0.0)
    rho_r = _side_values(rho, right, 0.0)
    # A boundary face sees the inner density on both sides.
    rho_sum = np.where(has_left & has_right, rho_l + rho_r, 2.0 * (rho_l + rho_r))
    sum_factor_l = np.where(has_right, 1.0, 2.0)
    sum_factor_r = np.where(has_left, 1.0, 2.0)
    d_rho_l = _side_values(d_rho, left, 0.0) * sum_factor_l
    d_rho_r = _side_values(d_rho, right, 0.0) * sum_factor_r

    # Darcy rows: alpha * U - (p_l - p_r) = 0 with alpha = a_K mu 2 / (rho_l + rho_r).
    a_k = face_mass_coefficients(mesh, problem.units.darcy_factor * arrays.el_perm)
    alpha = a_k * water.viscosity * 2.0 / rho_sum
    g = dirichlet_values(problem, mesh, ops, slab)
    p_left = _side_values(p, left, g)
    p_right = _side_values(p, right, g)
    r_u0 = np.where(darcy_active, alpha * flux - (p_left - p_right), flux)
    d_alpha_l = -alpha / rho_sum * d_rho_l
    d_alpha_r = -alpha / rho_sum * d_rho_r
    act0 = darcy_active.astype(np.float64)
    a_up_00 = _diag(act0 * (d_alpha_l * flux - 1.0)) @ ops.left + _diag(act0 * (d_alpha_r * flux + 1.0)) @ ops.right

    # Diffusion rows: beta * Z - (c_l - c_r) = 0 with beta = a_phiD 2 / (rho_l + rho_r); Z = 0 on the boundary.
    a_d = face_mass_coefficients(mesh, problem.diffusion * arrays.el_poro)
    beta = a_d * 2.0 / rho_sum
    c_l = _side_values(c, left, 0.0)
    c_r = _side_values(c, right, 0.0)
    r_u1 = np.where(diffusion_active, beta * diffusive - (c_l - c_r), diffusive)
    act1 = diffusion_active.astype(np.float64)
    d_beta_l = -beta / rho_sum * d_rho_l
    d_beta_r = -beta / rho_sum * d_rho_r
    a_up_10 = _diag(act1 * d_beta_l * diffusive) @ ops.left + _diag(act1 * d_beta_r * diffusive) @ ops.right
    a_up_11 = _diag(act1) @ (ops.right - ops.left)

    # Mass and tracer rows.
    low_side = _upwind_mask(flux, frozen_upwind, 0)
    _, upstream_selector = _upwind_selector(mesh, low_side)
    c_adv = _advected_concentration(problem, mesh, ops, c, low_side)

    weight = _accumulation_weight(mesh) * arrays.el_poro
    prev = _previous_values(mesh, cells, previous)
    p_prev, c_prev = prev[:, 0], prev[:, 1]
    rho_prev = density(p_prev, water)
    div = ops.divergence
    r_p0 = accumulation_row(rho, rho_prev, weight) + div @ flux
    r_p1 = accumulation_row(rho * c, rho_prev * c_prev, weight) + div @ (flux * c_adv) + div @ diffusive

    w = _diag(weight)
    a_pp_00 = _diag(weight * d_rho) - w @ ops.previous @ _diag(d_rho)
    a_pp_10 = _diag(weight * d_rho * c) - w @ ops.previous @ _diag(d_rho * c)
    a_pp_11 = _diag(weight * rho) - w @ ops.previous @ _diag(rho) + div @ _diag(flux) @ upstream_selector

    return _Terms(
        r_p=[r_p0, r_p1],
        a_pp=[[a_pp_00, None], [a_pp_10, a_pp_11]],
        r_u=[r_u0, r_u1],
        a_uu=[
            [_diag(np.where(darcy_active, alpha, 1.0)), None],
            [None, _diag(np.where(diffusion_active, beta, 1.0))],
        ],
        a_up=[[a_up_00, None], [a_up_10, a_up_11]],
        a_pu=[[div, None], [div @ _diag(c_adv), div]],
        upwind=low_side.reshape(-1, 1),
    )


def _two_phase_terms(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    ops: SlabOperators,
    cells: FloatArray,
    fluxes: FloatArray,
    previous: FloatArray,
    frozen_upwind: BoolArray | None,
) -> _Terms:
    arrays = mesh.arrays
    oil, water, relperm = problem.oil_props, problem.water, problem.relperm
    p, s = _split(cells, 2)
    aux_o, aux_w, flux_o, flux_w = _split(fluxes, 4)
    left, right = arrays.face_left, arrays.face_right
    active = ops.interior
    act = active.astype(np.float64)

    def capillary(sat: FloatArray) -> tuple[FloatArray, FloatArray]:
        if problem.capillary is None:
            return np.zeros_like(sat), np.zeros_like(sat)
        return (
            van_genuchten_pc(sat, problem.capillary, relperm.s_wirr),
            van_genuchten_pc_derivative(sat, problem.capillary, relperm.s_wirr),
        )

    pc, d_pc = capillary(s)
    p_w = p - pc
    rho_o, d_rho_o = density(p, oil), density_derivative(p, oil)
    rho_w, d_rho_w = density(p_w, water), density_derivative(p_w, water)
    d_rho_w_ds = -d_rho_w * d_pc
    krw, kro = brooks_corey(s, relperm)
    d_krw, d_kro = brooks_corey_derivatives(s, relperm)

    prev = _previous_values(mesh, cells, previous)
    p_prev, s_prev = prev[:, 0], prev[:, 1]
    pc_prev, _ = capillary(s_prev)
    rho_o_prev = density(p_prev, oil)
    rho_w_prev = density(p_prev - pc_prev, water)

    # Accumulation: total phi(rho_w s + rho_o (1 - s)), water phi rho_w s.
    weight = _accumulation_weight(mesh) * arrays.el_poro
    total = rho_w * s + rho_o * (1.0 - s)
    total_prev = rho_w_prev * s_prev + rho_o_prev * (1.0 - s_prev)
    div = ops.divergence
    r_p0 = accumulation_row(total, total_prev, weight) + div @ (flux_o + flux_w)
    r_p1 = accumulation_row(rho_w * s, rho_w_prev * s_prev, weight) + div @ flux_w

    total_dp = d_rho_w * s + d_rho_o * (1.0 - s)
    total_ds = d_rho_w_ds * s + rho_w - rho_o
    water_dp = d_rho_w * s
    water_ds = d_rho_w_ds * s + rho_w
    w = _diag(weight)

    def accumulation_block(derivative: FloatArray) -> sp.csr_matrix:
        return _diag(weight * derivative) - w @ ops.previous @ _diag(derivative)

    a_pp = [
        [accumulation_block(total_dp), accumulation_block(total_ds)],
        [accumulation_block(water_dp), accumulation_block(water_ds)],
    ]

    # Auxiliary Darcy rows for each phase potential.
    a = face_mass_coefficients(mesh, problem.units.darcy_factor * arrays.el_perm)
    p_l, p_r = _side_values(p, left, 0.0), _side_values(p, right, 0.0)
    pw_l, pw_r = _side_values(p_w, left, 0.0), _side_values(p_w, right, 0.0)
    r_u0 = np.where(active, a * aux_o - (p_l - p_r), aux_o)
    r_u1 = np.where(active, a * aux_w - (pw_l - pw_r), aux_w)
    gradient = _diag(act) @ (ops.right - ops.left)
    a_up_10_s = _diag(act) @ (ops.left @ _diag(d_pc) - ops.right @ _diag(d_pc))

    # Expansion rows U_alpha - lambda*_alpha Ut_alpha = 0 with the upwind mobility.
    low_o = _upwind_mask(aux_o, frozen_upwind, 0)
    low_w = _upwind_mask(aux_w, frozen_upwind, 1)
    up_o, select_o = _upwind_selector(mesh, low_o)
    up_w, select_w = _upwind_selector(mesh, low_w)
    kro_up = _side_values(kro, up_o, 0.0)
    krw_up = _side_values(krw, up_w, 0.0)
    rho_o_sum = _side_values(rho_o, left, 0.0) + _side_values(rho_o, right, 0.0)
    rho_w_sum = _side_values(rho_w, left, 0.0) + _side_values(rho_w, right, 0.0)
    lam_o = upwind_mobility(
        np.where(low_o, 1.0, -1.0),
        _side_values(rho_o, left, 0.0),
        _side_values(rho_o, right, 0.0),
        _side_values(kro, left, 0.0),
        _side_values(kro, right, 0.0),
        oil.viscosity,
    )
    lam_w = upwind_mobility(
        np.where(low_w, 1.0, -1.0),
        _side_values(rho_w, left, 0.0),
        _side_values(rho_w, right, 0.0),
        _side_values(krw, left, 0.0),
        _side_values(krw, right, 0.0),
        water.viscosity,
    )
    r_u2 = np.where(active, flux_o - lam_o * aux_o, flux_o)
    r_u3 = np.where(active, flux_w - lam_w * aux_w, flux_w)

    sides = ops.left + ops.right
    a_up_20 = _diag(-act * aux_o * kro_up / (2.0 * oil.viscosity)) @ sides @ _diag(d_rho_o)
    a_up_21 = _diag(-act * aux_o * rho_o_sum / (2.0 * oil.viscosity)) @ select_o @ _diag(d_kro)
    water_scale = _diag(-act * aux_w * krw_up / (2.0 * water.viscosity)) @ sides
    a_up_30 = water_scale @ _diag(d_rho_w)
    a_up_31 = water_scale @ _diag(d_rho_w_ds) + _diag(
        -act * aux_w * rho_w_sum / (2.0 * water.viscosity)
    ) @ select_w @ _diag(d_krw)

    n_faces = mesh.n_faces
    identity = sp.identity(n_faces, format="csr")
    darcy = _diag(np.where(active, a, 1.0))
    return _Terms(
        r_p=[r_p0, r_p1],
        a_pp=a_pp,
        r_u=[r_u0, r_u1, r_u2, r_u3],
        a_uu=[
            [darcy, None, None, None],
            [None, darcy, None, None],
            [_diag(-act * lam_o), None, identity, None],
            [None, _diag(-act * lam_w), None, identity],
        ],
        a_up=[
            [gradient, None],
            [gradient, a_up_10_s],
            [a_up_20, a_up_21],
            [a_up_30, a_up_31],
        ],
        a_pu=[[None, None, div, div], [None, None, None, div]],
        upwind=np.column_stack([low_o, low_w]),
    )


def well_rates(
    problem: ModelProblem, mesh: SpaceTimeMesh, operators: SlabOperators, cells: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Well source integrated over each element's time interval.

    Returns:
        Rates ``(n_elements, n_fields)`` and their derivatives
        ``(n_elements, n_fields, n_fields)``.
    """
    n_fields = cells.shape[1]
    rates = np.zeros((mesh.n_elements, n_fields))
    jacobian = np.zeros((mesh.n_elements, n_fields, n_fields))
    dt = mesh.arrays.el_dt
    for well in operators.wells:
        for element in well.elements:
            term = well_contribution(well.spec, problem, tuple(float(v) for v in cells[element]), well.well_index)
            rates[element] += np.asarray(term.rates) * dt[element]
            jacobian[element] += np.asarray(term.jacobian) * dt[element]
    return rates, jacobian


def _check_finite(system: SlabSystem, mesh: SpaceTimeMesh, fields: tuple[str, ...]) -> None:
    bad_cells = np.flatnonzero(~np.isfinite(system.r_p))
    if bad_cells.size:
        row = int(bad_cells[0])
        element = mesh.elements[row % mesh.n_elements]
        msg = (
            f"non-finite {fields[row // mesh.n_elements]} residual in element {element.id} "
            f"(subdomain {element.subdomain}, cell {element.index}, level {element.level})"
        )
        raise AssemblyError(msg)
    bad_faces = np.flatnonzero(~np.isfinite(system.r_u))
    if bad_faces.size:
        face = int(bad_faces[0]) % mesh.n_faces
        msg = f"non-finite flux residual on face {face}"
        raise AssemblyError(msg)
    for name in ("a_uu", "a_up", "a_pu", "a_pp"):
        block = getattr(system, name)
        if not np.all(np.isfinite(block.data)):
            msg = f"non-finite Jacobian entries in block {name}"
            raise AssemblyError(msg)


def residual_and_jacobian(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    dofmap: DofMap,
    cells: FloatArray,
    fluxes: FloatArray,
    previous: FloatArray,
    slab: int = 0,
    operators: SlabOperators | None = None,
    frozen_upwind: BoolArray | None = None,
) -> SlabSystem:
    """Residual and analytic Jacobian of one slab.

    Args:
        problem: Physics and data.
        mesh: The mesh.
        dofmap: Unknown enumeration of the mesh for this model.
        cells: Cell unknowns ``(n_elements, n_fields)``.
        fluxes: Flux unknowns ``(n_faces, n_families)``.
        previous: Cell state at the start of the slab ``(n_cells, n_fields)``.
        slab: Slab index, used for time-dependent data.
        operators: Precomputed operators; built on demand when omitted.
        frozen_upwind: Low-side-upwind flags per face and upwinded family, to
            hold the upwind choice fixed (e.g. for finite differences).

    Returns:
        The slab system. The upwind choice is held fixed within the Jacobian.

    Raises:
        AssemblyError: If any residual or Jacobian entry is not finite.
    """
    ops = operators if operators is not None else build_operators(problem, mesh)
    n_fields, n_families = len(dofmap.fields), len(dofmap.families)
    if cells.shape != (mesh.n_elements, n_fields) or fluxes.shape != (mesh.n_faces, n_families):
        msg = f"state shapes {cells.shape} and {fluxes.shape} do not match the DOF map"
        raise AssemblyError(msg)

    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        terms = _linear_terms(problem, mesh, ops, cells, fluxes, previous, slab)
    elif problem.kind is ModelKind.SINGLE_PHASE_TRACER:
        terms = _tracer_terms(problem, mesh, ops, cells, fluxes, previous, slab, frozen_upwind)
    else:
        terms = _two_phase_terms(problem, mesh, ops, cells, fluxes, previous, frozen_upwind)

    source = source_vector(mesh, _source_function(problem), mesh.slab_start(slab))
    rates, rate_jacobian = well_rates(problem, mesh, ops, cells)
    r_p = list(terms.r_p)
    # The source drives the first (pressure or total mass) equation only.
    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        r_p[0] = r_p[0] - source
    a_pp = [list(row) for row in terms.a_pp]
    for k in range(n_fields):
        r_p[k] = r_p[k] - rates[:, k]
        for j in range(n_fields):
            if np.any(rate_jacobian[:, k, j]):
                block = -_diag(rate_jacobian[:, k, j])
                a_pp[k][j] = block if a_pp[k][j] is None else a_pp[k][j] + block

    n_el, n_faces = mesh.n_elements, mesh.n_faces
    system = SlabSystem(
        a_uu=_block(terms.a_uu, n_faces, n_faces),
        a_up=_block(terms.a_up, n_faces, n_el),
        a_pu=_block(terms.a_pu, n_el, n_faces),
        a_pp=_block(a_pp, n_el, n_el),
        r_u=np.concatenate(terms.r_u),
        r_p=np.concatenate(r_p),
        n_faces=n_faces,
        n_families=n_families,
        n_elements=n_el,
        n_fields=n_fields,
        upwind=terms.upwind,
    )
    _check_finite(system, mesh, dofmap.fields)
    return system


def _block(blocks: list[list[sp.csr_matrix | None]], n_rows: int, n_cols: int) -> sp.csr_matrix:
    """``bmat`` that tolerates all-``None`` block rows and columns."""
    filled = [
        [sp.csr_matrix((n_rows, n_cols)) if entry is None else sp.csr_matrix(entry) for entry in row]
        for row in blocks
    ]
    return sp.csr_matrix(sp.bmat(filled, format="csr"))


def residual_norm(system: SlabSystem, mesh: SpaceTimeMesh) -> float:
    """Max of cell residuals scaled by pore volume and raw flux residuals."""
    arrays = mesh.arrays
    pore_volume = np.tile(arrays.el_volume * arrays.el_poro, system.n_fields)
    cell_part = float(np.max(np.abs(system.r_p) / pore_volume)) if system.r_p.size else 0.0
    flux_part = float(np.max(np.abs(system.r_u))) if system.r_u.size else 0.0
    return max(cell_part, flux_part)


@dataclass(frozen=True)
class BalanceRecord:
    """Mass (or volume) budget of one conserved quantity over one slab."""

    slab: int
    quantity: str
    stored_change: float
    well_net: float
    source: float
    boundary_outflow: float

    @property
    def imbalance(self) -> float:
        """Stored change plus outflow minus inputs; zero for an exact solve."""
        return self.stored_change + self.boundary_outflow - self.well_net - self.source


def stored_amounts(problem: ModelProblem, mesh: SpaceTimeMesh, values: FloatArray) -> FloatArray:
    """Conserved amounts per spatial cell for a cell state ``(n_cells, n_fields)``."""
    arrays = mesh.arrays
    volume = arrays.cell_volume
    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        return np.asarray((values[:, 0] * volume).reshape(-1, 1))
    porosity = np.zeros(mesh.n_cells)
    porosity[arrays.el_cell] = arrays.el_poro
    pore = volume * porosity
    if problem.kind is ModelKind.SINGLE_PHASE_TRACER:
        rho = density(values[:, 0], problem.water)
        return np.column_stack([pore * rho, pore * rho * values[:, 1]])
    s = values[:, 1]
    pc = (
        van_genuchten_pc(s, problem.capillary, problem.relperm.s_wirr)
        if problem.capillary is not None
        else np.zeros_like(s)
    )
    rho_w = density(values[:, 0] - pc, problem.water)
    rho_o = density(values[:, 0], problem.oil_props)
    return np.column_stack([pore * (rho_w * s + rho_o * (1.0 - s)), pore * rho_w * s])


BALANCE_QUANTITIES: dict[ModelKind, tuple[str, ...]] = {
    ModelKind.LINEAR_PARABOLIC: ("volume",),
    ModelKind.SINGLE_PHASE_TRACER: ("fluid_mass", "tracer_mass"),
    ModelKind.TWO_PHASE: ("total_mass", "water_mass"),
}


def slab_balance(
    problem: ModelProblem,
    mesh: SpaceTimeMesh,
    operators: SlabOperators,
    cells: FloatArray,
    fluxes: FloatArray,
    previous: FloatArray,
    slab: int,
) -> list[BalanceRecord]:
    """Budget of every conserved quantity over a converged slab."""
    arrays = mesh.arrays
    final = cells[arrays.cell_final]
    change = stored_amounts(problem, mesh, final) - stored_amounts(problem, mesh, previous)
    rates, _ = well_rates(problem, mesh, operators, cells)
    outward = operators.boundary_outward

    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        transported = [fluxes[:, 0]]
        source = source_vector(mesh, _source_function(problem), mesh.slab_start(slab))
        sources = [math.fsum(source)]
    elif problem.kind is ModelKind.SINGLE_PHASE_TRACER:
        c_adv = _advected_concentration(problem, mesh, operators, cells[:, 1], fluxes[:, 0] > 0)
        transported = [fluxes[:, 0], fluxes[:, 0] * c_adv + fluxes[:, 1]]
        sources = [0.0, 0.0]
    else:
        transported = [fluxes[:, 2] + fluxes[:, 3], fluxes[:, 3]]
        sources = [0.0, 0.0]

    return [
        BalanceRecord(
            slab=slab,
            quantity=quantity,
            stored_change=math.fsum(change[:, k]),
            well_net=math.fsum(rates[:, k]),
            source=sources[k],
            boundary_outflow=math.fsum(outward * transported[k]),
        )
        for k, quantity in enumerate(BALANCE_QUANTITIES[problem.kind])
    ]
