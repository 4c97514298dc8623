"""RT0 x DG0 space-time kernels: quadrature, basis normalisation and row formulas.

Flux DOFs are total fluxes through a space-time face, so a flux basis function
takes the value 1/|e| on its own face. With the trapezoidal rule along the flux
component and the midpoint rule elsewhere, the velocity mass matrix is diagonal
and every Darcy-type row couples one flux DOF to the two adjacent cells.
"""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from stevmfe.errors import SingularCoefficientError
from stevmfe.stmesh import NO_ELEMENT, DofMap, Element, Face, FaceKind, SpaceTimeMesh

FloatArray = npt.NDArray[np.float64]

TRAPEZOIDAL = "T"
MIDPOINT = "M"

SpaceTimeFunction = Callable[[tuple[float, ...], float], float]


@dataclass(frozen=True)
class QuadratureRule:
    """Rule tag per axis for one velocity component; the last tag is time."""

    component_axis: int
    tags: tuple[str, ...]

    @property
    def time_tag(self) -> str:
        """Tag used along the time axis."""
        return self.tags[-1]


def quadrature_rule(component_axis: int, dim: int) -> QuadratureRule:
    """Trapezoidal along the component axis, midpoint along every other axis and time."""
    if not 0 <= component_axis < dim:
        msg = f"component axis {component_axis} outside a {dim}-dimensional grid"
        raise ValueError(msg)
    spatial = tuple(TRAPEZOIDAL if axis == component_axis else MIDPOINT for axis in range(dim))
    return QuadratureRule(component_axis=component_axis, tags=(*spatial, MIDPOINT))


@dataclass(frozen=True)
class BasisDescriptor:
    """Piecewise-constant cell indicator and normalised flux basis of a face."""

    face: int
    face_measure: float

    def flux_trace(self, face: int) -> float:
        """Normal trace of the flux basis function on ``face``."""
        return 1.0 / self.face_measure if face == self.face else 0.0

    @staticmethod
    def cell_indicator(element: int, other: int) -> float:
        """Value of the indicator of ``element`` on ``other``."""
        return 1.0 if element == other else 0.0


@dataclass
class AssemblyRow:
    """Sparse row fragment: coefficients keyed by DOF id plus a constant term."""

    equation: int
    entries: dict[int, float] = field(default_factory=dict)
    constant: float = 0.0

    def add(self, dof: int, coefficient: float) -> None:
        """Accumulate a coefficient, merging repeated DOF ids."""
        if not np.isfinite(coefficient):
            msg = f"non-finite coefficient {coefficient} for DOF {dof} in row {self.equation}"
            raise ValueError(msg)
        self.entries[dof] = self.entries.get(dof, 0.0) + coefficient

    def evaluate(self, values: FloatArray) -> float:
        """Row applied to a vector of unknowns, constant included."""
        return float(sum(coefficient * values[dof] for dof, coefficient in self.entries.items()) + self.constant)


def velocity_mass_coeff(
    h_left: FloatArray | float,
    h_right: FloatArray | float,
    coeff_left: FloatArray | float,
    coeff_right: FloatArray | float,
    measure: FloatArray | float,
) -> FloatArray:
    """Diagonal velocity mass coefficient (1/(2|e|))(h_l/k_l + h_r/k_r).

    A side with zero width is absent (boundary face) and contributes nothing.

    Args:
        h_left: Width of the low-side cell along the face normal.
        h_right: Width of the high-side cell along the face normal.
        coeff_left: Coefficient (e.g. permeability) of the low-side cell.
        coeff_right: Coefficient of the high-side cell.
        measure: Space-time face measure |e|.

    Returns:
        The coefficient multiplying the flux DOF in its Darcy-type row.

    Raises:
        SingularCoefficientError: If a present side has a zero coefficient.
    """
    h_l = np.asarray(h_left, dtype=np.float64)
    h_r = np.asarray(h_right, dtype=np.float64)
    k_l = np.asarray(coeff_left, dtype=np.float64)
    k_r = np.asarray(coeff_right, dtype=np.float64)
    if np.any((h_l > 0) & (k_l == 0)) or np.any((h_r > 0) & (k_r == 0)):
        msg = "zero coefficient on a face side in the velocity mass term"
        raise SingularCoefficientError(msg)
    left = np.divide(h_l, k_l, out=np.zeros(np.broadcast(h_l, k_l).shape), where=h_l > 0)
    right = np.divide(h_r, k_r, out=np.zeros(np.broadcast(h_r, k_r).shape), where=h_r > 0)
    return np.asarray((left + right) / (2.0 * np.asarray(measure, dtype=np.float64)))


def face_mass_coefficients(mesh: SpaceTimeMesh, coeff: FloatArray) -> FloatArray:
    """``velocity_mass_coeff`` for every face of a mesh.

    Args:
        mesh: The mesh.
        coeff: Per-element coefficient, either ``(n_elements,)`` or
            ``(n_elements, dim)`` for a diagonal tensor.

    Returns:
        One coefficient per face.
    """
    arrays = mesh.arrays
    values = coeff if coeff.ndim == 2 else np.repeat(coeff[:, None], mesh.dim, axis=1)
    left = np.maximum(arrays.face_left, 0)
    right = np.maximum(arrays.face_right, 0)
    k_left = np.where(arrays.face_left >= 0, values[left, arrays.face_axis], 1.0)
    k_right = np.where(arrays.face_right >= 0, values[right, arrays.face_axis], 1.0)
    return velocity_mass_coeff(arrays.face_h_left, arrays.face_h_right, k_left, k_right, arrays.face_measure)


def divergence_matrix(mesh: SpaceTimeMesh) -> sp.csr_matrix:
    """Signed element-face incidence: +1 where the element is the low side, -1 where high.

    Row ``e`` is the flux divergence of element ``e``; the transpose holds the
    pressure-divergence coefficients of every face.
    """
    arrays = mesh.arrays
    faces = np.arange(mesh.n_faces)
    has_left = arrays.face_left != NO_ELEMENT
    has_right = arrays.face_right != NO_ELEMENT
    rows = np.concatenate([arrays.face_left[has_left], arrays.face_right[has_right]])
    cols = np.concatenate([faces[has_left], faces[has_right]])
    vals = np.concatenate([np.ones(int(has_left.sum())), -np.ones(int(has_right.sum()))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_elements, mesh.n_faces))


def pressure_divergence_row(face: Face, dofmap: DofMap, field_index: int = 0) -> AssemblyRow:
    """Pressure coupling of a face's Darcy row.

    For an interface sub-face the low and high sides are the elements paired by
    the trace intersection, i.e. the fine element at its own level and the
    coarse element at the containing coarse level. A boundary face keeps only its
    interior side; the Dirichlet datum enters through ``boundary_term``.
    """
    row = AssemblyRow(equation=dofmap.flux_dof(face.id))
    if face.left is not None:
        row.add(dofmap.cell_dof(face.left, field_index), 1.0)
    if face.right is not None:
        row.add(dofmap.cell_dof(face.right, field_index), -1.0)
    return row


def boundary_term(face: Face, g: SpaceTimeFunction, slab_start: float = 0.0) -> float:
    """Dirichlet datum at the face's space-time midpoint.

    Raises:
        ValueError: If the face is not on the outer boundary.
    """
    if face.kind is not FaceKind.BOUNDARY:
        msg = f"face {face.id} is not a boundary face"
        raise ValueError(msg)
    return float(g(face.centre, slab_start + face.t_mid))


def accumulation_row(
    current: FloatArray | float, previous: FloatArray | float, measure: FloatArray | float
) -> FloatArray:
    """Backward-Euler jump (current - previous) weighted by ``measure``."""
    return np.asarray((np.asarray(current) - np.asarray(previous)) * np.asarray(measure), dtype=np.float64)


def flux_divergence_row(
    mesh: SpaceTimeMesh, element: int, dofmap: DofMap, family: int = 0, field_index: int = 0
) -> AssemblyRow:
    """Signed sum of the flux DOFs on an element's spatial faces.

    A coarse element on an interface receives every sub-face flux of that side.
    """
    row = AssemblyRow(equation=dofmap.cell_dof(element, field_index))
    for face, sign in mesh.faces_of(element):
        row.add(dofmap.flux_dof(face, family), float(sign))
    return row


def source_row(element: Element, f: SpaceTimeFunction, slab_start: float = 0.0) -> float:
    """Source integrated with the midpoint rule: f(midpoint) * |E|."""
    t_mid = slab_start + 0.5 * (element.t_lo + element.t_hi)
    return float(f(element.centre, t_mid)) * element.measure


def source_vector(
    mesh: SpaceTimeMesh, f: Callable[[FloatArray, FloatArray], FloatArray], slab_start: float = 0.0
) -> FloatArray:
    """``source_row`` for every element, with a vectorised source function."""
    arrays = mesh.arrays
    values = f(arrays.el_centre, slab_start + arrays.el_t_mid)
    return np.asarray(values * arrays.el_measure, dtype=np.float64)
