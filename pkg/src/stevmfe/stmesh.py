"""Space-time multiblock mesh: subdomains, elements, faces and interface patches."""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from enum import StrEnum
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from stevmfe.errors import ConfigurationError, UnsupportedMeshError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

AXIS_NAMES = ("x", "y")
RELATIVE_TOLERANCE = 1e-9
NO_ELEMENT = -1


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= RELATIVE_TOLERANCE * max(1.0, abs(a), abs(b))


def _integer_quotient(numerator: float, denominator: float, what: str) -> int:
    """Return numerator/denominator when it is a positive integer.

    Args:
        numerator: Quantity to divide.
        denominator: Divisor.
        what: Description used in the error message.

    Returns:
        The integer quotient.

    Raises:
        ConfigurationError: If the quotient is not a positive integer.
    """
    quotient = numerator / denominator
    rounded = round(quotient)
    if rounded < 1 or abs(quotient - rounded) > RELATIVE_TOLERANCE * max(1.0, quotient):
        msg = f"{what}: {numerator:g} is not an integer multiple of {denominator:g}"
        raise ConfigurationError(msg)
    return rounded


def _integer_ratio(a: float, b: float, what: str) -> int:
    """Return max(a, b)/min(a, b), which must be an integer."""
    big, small = max(a, b), min(a, b)
    ratio = big / small
    rounded = round(ratio)
    if abs(ratio - rounded) > RELATIVE_TOLERANCE * ratio:
        msg = f"non-integer refinement ratio {ratio:.6g} in {what}"
        raise UnsupportedMeshError(msg)
    return rounded


@dataclass(frozen=True, eq=False)
class Subdomain:
    """Axis-aligned box with a uniform space-time grid and per-cell material.

    Material arrays are stored in lexicographic cell order with x fastest.
    """

    id: int
    origin: tuple[float, ...]
    extent: tuple[float, ...]
    cells: tuple[int, ...]
    dt: float
    permeability: FloatArray
    porosity: FloatArray

    @classmethod
    def uniform(
        cls,
        sub_id: int,
        origin: tuple[float, ...],
        extent: tuple[float, ...],
        cells: tuple[int, ...],
        dt: float,
        permeability: float = 1.0,
        porosity: float = 1.0,
    ) -> "Subdomain":
        """Create a subdomain with homogeneous isotropic material."""
        n_cells = math.prod(cells)
        return cls(
            id=sub_id,
            origin=tuple(float(v) for v in origin),
            extent=tuple(float(v) for v in extent),
            cells=tuple(cells),
            dt=float(dt),
            permeability=np.full((n_cells, len(cells)), float(permeability)),
            porosity=np.full(n_cells, float(porosity)),
        )

    @property
    def dim(self) -> int:
        """Spatial dimension."""
        return len(self.cells)

    @property
    def h(self) -> tuple[float, ...]:
        """Cell size per axis."""
        return tuple(e / n for e, n in zip(self.extent, self.cells, strict=True))

    @property
    def high(self) -> tuple[float, ...]:
        """Upper corner of the box."""
        return tuple(o + e for o, e in zip(self.origin, self.extent, strict=True))

    @property
    def n_cells(self) -> int:
        """Number of spatial cells."""
        return math.prod(self.cells)

    def cell_indices(self) -> list[tuple[int, ...]]:
        """Spatial multi-indices in lexicographic order, x fastest."""
        ranges = [range(n) for n in reversed(self.cells)]
        return [tuple(reversed(idx)) for idx in itertools.product(*ranges)]

    def flat_index(self, index: tuple[int, ...]) -> int:
        """Lexicographic position of a spatial multi-index."""
        flat = 0
        stride = 1
        for i, n in zip(index, self.cells, strict=True):
            flat += i * stride
            stride *= n
        return flat

    def cell_centre(self, index: tuple[int, ...]) -> tuple[float, ...]:
        """Centre coordinates of a cell."""
        return tuple(o + (i + 0.5) * h for o, i, h in zip(self.origin, index, self.h, strict=True))

    def levels(self, slab_length: float) -> int:
        """Number of time levels of this subdomain inside one slab."""
        return _integer_quotient(slab_length, self.dt, f"subdomain {self.id} dt")


@dataclass(frozen=True)
class MeshSpec:
    """Input description of a space-time multiblock mesh."""

    origin: tuple[float, ...]
    extent: tuple[float, ...]
    t_end: float
    subdomains: tuple[Subdomain, ...]
    slab_length: float | None = None
    thickness: float = 1.0


class ElementKey(NamedTuple):
    """Identifies an element by subdomain, spatial index and slab-relative level."""

    subdomain: int
    index: tuple[int, ...]
    level: int


@dataclass(frozen=True)
class Element:
    """Space-time element; times are relative to the start of its slab."""

    id: int
    subdomain: int
    index: tuple[int, ...]
    level: int
    cell: int
    volume: float
    t_lo: float
    t_hi: float
    centre: tuple[float, ...]

    @property
    def dt(self) -> float:
        """Length of the element's time interval."""
        return self.t_hi - self.t_lo

    @property
    def measure(self) -> float:
        """Space-time measure |E|."""
        return self.volume * self.dt


class FaceKind(StrEnum):
    """Kind of a spatial-normal face."""

    INTERIOR = "interior"
    BOUNDARY = "boundary"
    INTERFACE = "interface"


FACE_KIND_CODES = {FaceKind.INTERIOR: 0, FaceKind.BOUNDARY: 1, FaceKind.INTERFACE: 2}


@dataclass(frozen=True)
class Face:
    """Spatial-normal face carrying one flux DOF per flux family.

    ``left`` is the element on the low side along ``axis``; a boundary face has
    exactly one of ``left``/``right`` set. ``h_left``/``h_right`` are the full
    widths of the adjacent cells along ``axis`` (zero for a missing side).
    """

    id: int
    axis: int
    left: int | None
    right: int | None
    kind: FaceKind
    area: float
    t_lo: float
    t_hi: float
    h_left: float
    h_right: float
    centre: tuple[float, ...]
    patch: int | None = None

    @property
    def measure(self) -> float:
        """Space-time measure |e| (area times time-interval length)."""
        return self.area * (self.t_hi - self.t_lo)

    @property
    def t_mid(self) -> float:
        """Slab-relative time midpoint."""
        return 0.5 * (self.t_lo + self.t_hi)

    @property
    def boundary_name(self) -> str | None:
        """Boundary label such as ``x_low`` for boundary faces, else None."""
        if self.kind is not FaceKind.BOUNDARY:
            return None
        side = "low" if self.left is None else "high"
        return f"{AXIS_NAMES[self.axis]}_{side}"


@dataclass(frozen=True)
class SubFace:
    """Piece of an interface trace shared by one element on each side."""

    left: ElementKey
    right: ElementKey
    fine_side: str
    area: float
    t_lo: float
    t_hi: float
    centre: tuple[float, ...]
    face: int = NO_ELEMENT

    @property
    def measure(self) -> float:
        """Space-time measure of the sub-face."""
        return self.area * (self.t_hi - self.t_lo)

    @property
    def fine_element(self) -> ElementKey:
        """Element on the finer side."""
        return self.left if self.fine_side == "left" else self.right

    @property
    def coarse_element(self) -> ElementKey:
        """Element on the coarser side."""
        return self.right if self.fine_side == "left" else self.left


@dataclass(frozen=True)
class InterfacePatch:
    """Intersection of two subdomain traces over one slab."""

    pair: tuple[int, int]
    axis: int
    left: int
    right: int
    sub_faces: tuple[SubFace, ...]
    intersection_measure: float

    @property
    def measure(self) -> float:
        """Sum of sub-face measures."""
        return math.fsum(sf.measure for sf in self.sub_faces)


@dataclass(frozen=True, eq=False)
class MeshArrays:
    """Flat numpy views of elements, faces and spatial cells."""

    el_sub: IntArray
    el_level: IntArray
    el_cell: IntArray
    el_prev: IntArray
    el_volume: FloatArray
    el_t_lo: FloatArray
    el_t_hi: FloatArray
    el_centre: FloatArray
    el_perm: FloatArray
    el_poro: FloatArray
    face_axis: IntArray
    face_left: IntArray
    face_right: IntArray
    face_kind: IntArray
    face_area: FloatArray
    face_t_lo: FloatArray
    face_t_hi: FloatArray
    face_h_left: FloatArray
    face_h_right: FloatArray
    face_centre: FloatArray
    cell_sub: IntArray
    cell_final: IntArray
    cell_volume: FloatArray
    cell_centre: FloatArray
    cell_h: FloatArray

    @property
    def el_dt(self) -> FloatArray:
        """Element time-interval lengths."""
        return self.el_t_hi - self.el_t_lo

    @property
    def el_measure(self) -> FloatArray:
        """Element space-time measures."""
        return self.el_volume * self.el_dt

    @property
    def el_t_mid(self) -> FloatArray:
        """Slab-relative element time midpoints."""
        return 0.5 * (self.el_t_lo + self.el_t_hi)

    @property
    def face_measure(self) -> FloatArray:
        """Face space-time measures."""
        return self.face_area * (self.face_t_hi - self.face_t_lo)

    @property
    def face_t_mid(self) -> FloatArray:
        """Slab-relative face time midpoints."""
        return 0.5 * (self.face_t_lo + self.face_t_hi)


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    """Multiblock space-time mesh for one slab, repeated ``n_slabs`` times."""

    origin: tuple[float, ...]
    extent: tuple[float, ...]
    t_end: float
    slab_length: float
    n_slabs: int
    thickness: float
    subdomains: tuple[Subdomain, ...]
    elements: tuple[Element, ...]
    faces: tuple[Face, ...]
    patches: tuple[InterfacePatch, ...]
    arrays: MeshArrays
    element_offsets: dict[int, int]

    @property
    def dim(self) -> int:
        """Spatial dimension."""
        return len(self.origin)

    @property
    def n_elements(self) -> int:
        """Elements per slab."""
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        """Faces per slab."""
        return len(self.faces)

    @property
    def n_cells(self) -> int:
        """Spatial cells over all subdomains."""
        return len(self.arrays.cell_sub)

    def subdomain(self, sub_id: int) -> Subdomain:
        """Look up a subdomain by id.

        Raises:
            KeyError: If no subdomain has that id.
        """
        for sub in self.subdomains:
            if sub.id == sub_id:
                return sub
        msg = f"unknown subdomain {sub_id}"
        raise KeyError(msg)

    def levels(self, sub_id: int) -> int:
        """Time levels per slab in a subdomain."""
        return self.subdomain(sub_id).levels(self.slab_length)

    def element_id(self, sub_id: int, index: tuple[int, ...], level: int) -> int:
        """Element id of a (subdomain, spatial index, level) triple."""
        sub = self.subdomain(sub_id)
        return self.element_offsets[sub_id] + level * sub.n_cells + sub.flat_index(index)

    def faces_of(self, element: int) -> list[tuple[int, int]]:
        """Faces bounding an element with their outward sign (+1 or -1)."""
        arrays = self.arrays
        outgoing = [(int(f), 1) for f in np.flatnonzero(arrays.face_left == element)]
        incoming = [(int(f), -1) for f in np.flatnonzero(arrays.face_right == element)]
        return sorted(outgoing + incoming)

    def space_time_measure(self) -> float:
        """Sum of |E| over every element of every slab."""
        return math.fsum(self.arrays.el_measure) * self.n_slabs

    def slab_start(self, slab: int) -> float:
        """Absolute time at which a slab begins."""
        return slab * self.slab_length


def _box_overlap(a: Subdomain, b: Subdomain) -> float:
    lengths = [
        max(0.0, min(ah, bh) - max(ao, bo)) for ao, ah, bo, bh in zip(a.origin, a.high, b.origin, b.high, strict=True)
    ]
    return math.prod(lengths)


def _check_spec(spec: MeshSpec) -> None:
    """Validate global box and subdomain layout before any allocation."""
    dim = len(spec.origin)
    if dim not in (1, 2) or len(spec.extent) != dim:
        msg = f"mesh.origin/extent: spatial dimension must be 1 or 2, got {dim}"
        raise ConfigurationError(msg)
    if any(e <= 0 for e in spec.extent):
        msg = f"mesh.extent: non-positive dimension {spec.extent}"
        raise ConfigurationError(msg)
    if spec.t_end <= 0:
        msg = f"mesh.t_end: non-positive dimension {spec.t_end}"
        raise ConfigurationError(msg)
    if spec.thickness <= 0:
        msg = f"mesh.thickness: non-positive dimension {spec.thickness}"
        raise ConfigurationError(msg)
    if spec.slab_length is not None and spec.slab_length <= 0:
        msg = f"mesh.slab_length: non-positive dimension {spec.slab_length}"
        raise ConfigurationError(msg)
    if not spec.subdomains:
        msg = "mesh.subdomains: at least one subdomain is required"
        raise ConfigurationError(msg)

    ids = [sub.id for sub in spec.subdomains]
    if len(set(ids)) != len(ids):
        msg = f"mesh.subdomains: duplicate subdomain ids {ids}"
        raise ConfigurationError(msg)

    high = tuple(o + e for o, e in zip(spec.origin, spec.extent, strict=True))
    for position, sub in enumerate(spec.subdomains):
        path = f"mesh.subdomains[{position}]"
        if sub.dim != dim or len(sub.origin) != dim or len(sub.extent) != dim:
            msg = f"{path}: dimension does not match the global box"
            raise ConfigurationError(msg)
        if any(n <= 0 for n in sub.cells):
            msg = f"{path}.cells: non-positive dimension {sub.cells}"
            raise ConfigurationError(msg)
        if any(e <= 0 for e in sub.extent):
            msg = f"{path}.extent: non-positive dimension {sub.extent}"
            raise ConfigurationError(msg)
        if sub.dt <= 0:
            msg = f"{path}.dt: non-positive dimension {sub.dt}"
            raise ConfigurationError(msg)
        if sub.permeability.shape != (sub.n_cells, dim) or np.any(sub.permeability <= 0):
            msg = f"{path}.permeability: need {sub.n_cells}x{dim} strictly positive values"
            raise ConfigurationError(msg)
        if sub.porosity.shape != (sub.n_cells,) or np.any(sub.porosity <= 0) or np.any(sub.porosity > 1):
            msg = f"{path}.porosity: need {sub.n_cells} values in (0, 1]"
            raise ConfigurationError(msg)
        for axis in range(dim):
            below = sub.origin[axis] < spec.origin[axis] and not _close(sub.origin[axis], spec.origin[axis])
            above = sub.high[axis] > high[axis] and not _close(sub.high[axis], high[axis])
            if below or above:
                msg = f"{path}: box lies outside the global domain along {AXIS_NAMES[axis]}"
                raise ConfigurationError(msg)

    for a, b in itertools.combinations(spec.subdomains, 2):
        overlap = _box_overlap(a, b)
        if overlap > RELATIVE_TOLERANCE * min(math.prod(a.extent), math.prod(b.extent)):
            msg = f"mesh.subdomains: overlap detected between subdomains {a.id} and {b.id}"
            raise ConfigurationError(msg)

    covered = math.fsum(math.prod(sub.extent) for sub in spec.subdomains)
    total = math.prod(spec.extent)
    if covered < total * (1.0 - RELATIVE_TOLERANCE):
        msg = f"mesh.subdomains: gap detected, subdomains cover {covered:g} of {total:g}"
        raise ConfigurationError(msg)


def _refine_interval(
    sub_a: Subdomain, sub_b: Subdomain, axis: int, lo: float, hi: float
) -> list[tuple[float, float]]:
    """Common refinement of two tangential grids over [lo, hi]."""
    _integer_ratio(sub_a.h[axis], sub_b.h[axis], f"tangential cell size along {AXIS_NAMES[axis]}")
    for sub in (sub_a, sub_b):
        for end in (lo, hi):
            position = (end - sub.origin[axis]) / sub.h[axis]
            if abs(position - round(position)) > RELATIVE_TOLERANCE * max(1.0, abs(position)):
                msg = (
                    f"trace between subdomains {sub_a.id} and {sub_b.id} does not align with the grid of "
                    f"subdomain {sub.id} along {AXIS_NAMES[axis]}"
                )
                raise UnsupportedMeshError(msg)
    h = min(sub_a.h[axis], sub_b.h[axis])
    count = round((hi - lo) / h)
    return [(lo + k * h, lo + (k + 1) * h) for k in range(count)]


def intersect_traces(
    sub_a: Subdomain, sub_b: Subdomain, slab_length: float, thickness: float = 1.0
) -> InterfacePatch:
    """Intersect the boundary traces of two subdomains over one slab.

    Sub-faces are the Cartesian refinement of the coarser trace by the finer one,
    in every tangential direction and in time.

    Args:
        sub_a: First subdomain.
        sub_b: Second subdomain.
        slab_length: Length of a matching slab.
        thickness: Out-of-plane depth applied to face areas.

    Returns:
        The interface patch; empty when the traces meet in a set of zero measure.

    Raises:
        UnsupportedMeshError: If a refinement ratio is not an integer.
    """
    dim = sub_a.dim
    for axis in range(dim):
        if _close(sub_a.high[axis], sub_b.origin[axis]):
            left, right = sub_a, sub_b
        elif _close(sub_b.high[axis], sub_a.origin[axis]):
            left, right = sub_b, sub_a
        else:
            continue
        tangential = [t for t in range(dim) if t != axis]
        bounds = [(max(left.origin[t], right.origin[t]), min(left.high[t], right.high[t])) for t in tangential]
        if any(hi - lo <= RELATIVE_TOLERANCE * max(1.0, abs(hi)) for lo, hi in bounds):
            continue
        return _build_patch(left, right, axis, tangential, bounds, slab_length, thickness)

    logger.debug("Subdomains %d and %d do not share a trace", sub_a.id, sub_b.id)
    return InterfacePatch(
        pair=(sub_a.id, sub_b.id),
        axis=-1,
        left=sub_a.id,
        right=sub_b.id,
        sub_faces=(),
        intersection_measure=0.0,
    )


def _build_patch(
    left: Subdomain,
    right: Subdomain,
    axis: int,
    tangential: list[int],
    bounds: list[tuple[float, float]],
    slab_length: float,
    thickness: float,
) -> InterfacePatch:
    _integer_ratio(left.dt, right.dt, f"time step between subdomains {left.id} and {right.id}")
    dt_fine = min(left.dt, right.dt)
    time_segments = [(k * dt_fine, (k + 1) * dt_fine) for k in range(round(slab_length / dt_fine))]

    if tangential:
        t_axis = tangential[0]
        segments = _refine_interval(left, right, t_axis, *bounds[0])
        trace_area = (bounds[0][1] - bounds[0][0]) * thickness
    else:
        t_axis = -1
        segments = [(0.0, 1.0)]
        trace_area = thickness

    # Finer in time wins; ties go to the finer tangential grid, then to the left side.
    left_key = (left.dt, left.h[t_axis] if t_axis >= 0 else 0.0)
    right_key = (right.dt, right.h[t_axis] if t_axis >= 0 else 0.0)
    fine_side = "right" if right_key < left_key else "left"

    sub_faces: list[SubFace] = []
    for t_lo, t_hi in time_segments:
        t_mid = 0.5 * (t_lo + t_hi)
        left_level = int(t_mid // left.dt)
        right_level = int(t_mid // right.dt)
        for lo, hi in segments:
            left_index = [0] * left.dim
            right_index = [0] * right.dim
            left_index[axis] = left.cells[axis] - 1
            right_index[axis] = 0
            centre = [0.0] * left.dim
            centre[axis] = left.high[axis]
            if t_axis >= 0:
                mid = 0.5 * (lo + hi)
                left_index[t_axis] = int((mid - left.origin[t_axis]) // left.h[t_axis])
                right_index[t_axis] = int((mid - right.origin[t_axis]) // right.h[t_axis])
                centre[t_axis] = mid
                area = (hi - lo) * thickness
            else:
                area = thickness
            sub_faces.append(
                SubFace(
                    left=ElementKey(left.id, tuple(left_index), left_level),
                    right=ElementKey(right.id, tuple(right_index), right_level),
                    fine_side=fine_side,
                    area=area,
                    t_lo=t_lo,
                    t_hi=t_hi,
                    centre=tuple(centre),
                )
            )

    return InterfacePatch(
        pair=(min(left.id, right.id), max(left.id, right.id)),
        axis=axis,
        left=left.id,
        right=right.id,
        sub_faces=tuple(sub_faces),
        intersection_measure=trace_area * slab_length,
    )


class _MeshBuilder:
    """Accumulates elements and faces while a mesh is constructed."""

    def __init__(self, spec: MeshSpec, slab_length: float) -> None:
        self.spec = spec
        self.slab_length = slab_length
        self.subdomains = tuple(sorted(spec.subdomains, key=lambda s: s.id))
        self.elements: list[Element] = []
        self.faces: list[Face] = []
        self.key_to_element: dict[ElementKey, int] = {}
        self.offsets: dict[int, int] = {}
        self.cell_ids: dict[tuple[int, tuple[int, ...]], int] = {}

    def _face_area(self, sub: Subdomain, axis: int) -> float:
        area = self.spec.thickness
        for t in range(sub.dim):
            if t != axis:
                area *= sub.h[t]
        return area

    def add_elements(self) -> None:
        for sub in self.subdomains:
            for index in sub.cell_indices():
                self.cell_ids[(sub.id, index)] = len(self.cell_ids)
        for sub in self.subdomains:
            self.offsets[sub.id] = len(self.elements)
            volume = math.prod(sub.h) * self.spec.thickness
            for level in range(sub.levels(self.slab_length)):
                for index in sub.cell_indices():
                    key = ElementKey(sub.id, index, level)
                    self.key_to_element[key] = len(self.elements)
                    self.elements.append(
                        Element(
                            id=len(self.elements),
                            subdomain=sub.id,
                            index=index,
                            level=level,
                            cell=self.cell_ids[(sub.id, index)],
                            volume=volume,
                            t_lo=level * sub.dt,
                            t_hi=(level + 1) * sub.dt,
                            centre=sub.cell_centre(index),
                        )
                    )

    def _append_face(
        self,
        axis: int,
        left: int | None,
        right: int | None,
        kind: FaceKind,
        area: float,
        t_lo: float,
        t_hi: float,
        h_left: float,
        h_right: float,
        centre: tuple[float, ...],
        patch: int | None = None,
    ) -> int:
        face_id = len(self.faces)
        self.faces.append(
            Face(
                id=face_id,
                axis=axis,
                left=left,
                right=right,
                kind=kind,
                area=area,
                t_lo=t_lo,
                t_hi=t_hi,
                h_left=h_left,
                h_right=h_right,
                centre=centre,
                patch=patch,
            )
        )
        return face_id

    def add_subdomain_faces(self) -> None:
        spec = self.spec
        high = tuple(o + e for o, e in zip(spec.origin, spec.extent, strict=True))
        for sub in self.subdomains:
            on_low = [_close(sub.origin[a], spec.origin[a]) for a in range(sub.dim)]
            on_high = [_close(sub.high[a], high[a]) for a in range(sub.dim)]
            for level in range(sub.levels(self.slab_length)):
                t_lo, t_hi = level * sub.dt, (level + 1) * sub.dt
                for axis in range(sub.dim):
                    area = self._face_area(sub, axis)
                    h = sub.h[axis]
                    for index in sub.cell_indices():
                        element = self.key_to_element[ElementKey(sub.id, index, level)]
                        centre = list(sub.cell_centre(index))
                        if index[axis] == 0 and on_low[axis]:
                            centre[axis] = sub.origin[axis]
                            self._append_face(
                                axis=axis, left=None, right=element, kind=FaceKind.BOUNDARY, area=area,
                                t_lo=t_lo, t_hi=t_hi, h_left=0.0, h_right=h, centre=tuple(centre),
                            )
                        if index[axis] < sub.cells[axis] - 1:
                            neighbour = list(index)
                            neighbour[axis] += 1
                            other = self.key_to_element[ElementKey(sub.id, tuple(neighbour), level)]
                            centre[axis] = sub.origin[axis] + (index[axis] + 1) * h
                            self._append_face(
                                axis=axis, left=element, right=other, kind=FaceKind.INTERIOR, area=area,
                                t_lo=t_lo, t_hi=t_hi, h_left=h, h_right=h, centre=tuple(centre),
                            )
                        elif on_high[axis]:
                            centre[axis] = sub.high[axis]
                            self._append_face(
                                axis=axis, left=element, right=None, kind=FaceKind.BOUNDARY, area=area,
                                t_lo=t_lo, t_hi=t_hi, h_left=h, h_right=0.0, centre=tuple(centre),
                            )

    def add_interfaces(self) -> list[InterfacePatch]:
        patches: list[InterfacePatch] = []
        for sub_a, sub_b in itertools.combinations(self.subdomains, 2):
            patch = intersect_traces(sub_a, sub_b, self.slab_length, self.spec.thickness)
            if not patch.sub_faces:
                continue
            left = next(s for s in self.subdomains if s.id == patch.left)
            right = next(s for s in self.subdomains if s.id == patch.right)
            placed = []
            for sub_face in patch.sub_faces:
                face_id = self._append_face(
                    axis=patch.axis,
                    left=self.key_to_element[sub_face.left],
                    right=self.key_to_element[sub_face.right],
                    kind=FaceKind.INTERFACE,
                    area=sub_face.area,
                    t_lo=sub_face.t_lo,
                    t_hi=sub_face.t_hi,
                    h_left=left.h[patch.axis],
                    h_right=right.h[patch.axis],
                    centre=sub_face.centre,
                    patch=len(patches),
                )
                placed.append(replace(sub_face, face=face_id))
            patches.append(replace(patch, sub_faces=tuple(placed)))
        return patches

    def check_coverage(self, patches: list[InterfacePatch]) -> None:
        """Every subdomain side off the global boundary must be fully matched."""
        spec = self.spec
        high = tuple(o + e for o, e in zip(spec.origin, spec.extent, strict=True))
        covered: dict[tuple[int, int, str], float] = {}
        for patch in patches:
            per_slab = patch.measure / self.slab_length
            covered[(patch.left, patch.axis, "high")] = covered.get((patch.left, patch.axis, "high"), 0.0) + per_slab
            covered[(patch.right, patch.axis, "low")] = covered.get((patch.right, patch.axis, "low"), 0.0) + per_slab
        for sub in self.subdomains:
            for axis in range(sub.dim):
                side_area = self._face_area(sub, axis) * sub.n_cells / sub.cells[axis]
                for side, on_boundary in (
                    ("low", _close(sub.origin[axis], spec.origin[axis])),
                    ("high", _close(sub.high[axis], high[axis])),
                ):
                    if on_boundary:
                        continue
                    area = covered.get((sub.id, axis, side), 0.0)
                    if abs(area - side_area) > RELATIVE_TOLERANCE * side_area:
                        msg = (
                            f"mesh.subdomains: gap detected on the {AXIS_NAMES[axis]}_{side} side of "
                            f"subdomain {sub.id}"
                        )
                        raise ConfigurationError(msg)

    def arrays(self) -> MeshArrays:
        elements, faces = self.elements, self.faces
        dim = len(self.spec.origin)
        n_cells = len(self.cell_ids)
        subs = {sub.id: sub for sub in self.subdomains}

        el_prev = np.full(len(elements), NO_ELEMENT, dtype=np.int64)
        for element in elements:
            if element.level > 0:
                el_prev[element.id] = self.key_to_element[
                    ElementKey(element.subdomain, element.index, element.level - 1)
                ]

        cell_sub = np.zeros(n_cells, dtype=np.int64)
        cell_final = np.zeros(n_cells, dtype=np.int64)
        cell_volume = np.zeros(n_cells)
        cell_centre = np.zeros((n_cells, dim))
        cell_h = np.zeros((n_cells, dim))
        for (sub_id, index), cell in self.cell_ids.items():
            sub = subs[sub_id]
            cell_sub[cell] = sub_id
            cell_final[cell] = self.key_to_element[ElementKey(sub_id, index, sub.levels(self.slab_length) - 1)]
            cell_volume[cell] = math.prod(sub.h) * self.spec.thickness
            cell_centre[cell] = sub.cell_centre(index)
            cell_h[cell] = sub.h

        el_perm = np.array([subs[e.subdomain].permeability[subs[e.subdomain].flat_index(e.index)] for e in elements])
        el_poro = np.array([subs[e.subdomain].porosity[subs[e.subdomain].flat_index(e.index)] for e in elements])

        return MeshArrays(
            el_sub=np.array([e.subdomain for e in elements], dtype=np.int64),
            el_level=np.array([e.level for e in elements], dtype=np.int64),
            el_cell=np.array([e.cell for e in elements], dtype=np.int64),
            el_prev=el_prev,
            el_volume=np.array([e.volume for e in elements]),
            el_t_lo=np.array([e.t_lo for e in elements]),
            el_t_hi=np.array([e.t_hi for e in elements]),
            el_centre=np.array([e.centre for e in elements], dtype=np.float64).reshape(len(elements), dim),
            el_perm=el_perm.reshape(len(elements), dim),
            el_poro=el_poro,
            face_axis=np.array([f.axis for f in faces], dtype=np.int64),
            face_left=np.array([NO_ELEMENT if f.left is None else f.left for f in faces], dtype=np.int64),
            face_right=np.array([NO_ELEMENT if f.right is None else f.right for f in faces], dtype=np.int64),
            face_kind=np.array([FACE_KIND_CODES[f.kind] for f in faces], dtype=np.int64),
            face_area=np.array([f.area for f in faces]),
            face_t_lo=np.array([f.t_lo for f in faces]),
            face_t_hi=np.array([f.t_hi for f in faces]),
            face_h_left=np.array([f.h_left for f in faces]),
            face_h_right=np.array([f.h_right for f in faces]),
            face_centre=np.array([f.centre for f in faces], dtype=np.float64).reshape(len(faces), dim),
            cell_sub=cell_sub,
            cell_final=cell_final,
            cell_volume=cell_volume,
            cell_centre=cell_centre,
            cell_h=cell_h,
        )


def build_mesh(spec: MeshSpec) -> SpaceTimeMesh:
    """Build the space-time multiblock mesh described by ``spec``.

    Args:
        spec: Global box, subdomains and slab structure.

    Returns:
        Immutable mesh holding one slab's elements, faces and interface patches.

    Raises:
        ConfigurationError: On overlap, gap, non-positive dimension or a time
            step that does not divide the slab length.
        UnsupportedMeshError: On a non-integer interface refinement ratio.
    """
    _check_spec(spec)
    slab_length = spec.slab_length if spec.slab_length is not None else max(sub.dt for sub in spec.subdomains)
    for sub in spec.subdomains:
        sub.levels(slab_length)
    n_slabs = _integer_quotient(spec.t_end, slab_length, "mesh.t_end")

    builder = _MeshBuilder(spec, slab_length)
    builder.add_elements()
    builder.add_subdomain_faces()
    patches = builder.add_interfaces()
    builder.check_coverage(patches)

    mesh = SpaceTimeMesh(
        origin=tuple(spec.origin),
        extent=tuple(spec.extent),
        t_end=spec.t_end,
        slab_length=slab_length,
        n_slabs=n_slabs,
        thickness=spec.thickness,
        subdomains=builder.subdomains,
        elements=tuple(builder.elements),
        faces=tuple(builder.faces),
        patches=tuple(patches),
        arrays=builder.arrays(),
        element_offsets=builder.offsets,
    )
    logger.info(
        "Built mesh: %d elements and %d faces per slab (%d interface sub-faces), %d slabs of length %g",
        mesh.n_elements,
        mesh.n_faces,
        sum(len(p.sub_faces) for p in patches),
        n_slabs,
        slab_length,
    )
    return mesh


def validate_matching_times(mesh: SpaceTimeMesh) -> dict[tuple[int, int], int]:
    """Time refinement ratio l across every interface.

    Args:
        mesh: A built mesh.

    Returns:
        Mapping from (left subdomain, right subdomain) to l = dt_coarse / dt_fine.

    Raises:
        ConfigurationError: If a ratio is not an integer or a subdomain's time
            grid does not land on every slab boundary.
    """
    ratios: dict[tuple[int, int], int] = {}
    for patch in mesh.patches:
        left = mesh.subdomain(patch.left)
        right = mesh.subdomain(patch.right)
        for sub in (left, right):
            _integer_quotient(mesh.slab_length, sub.dt, f"slab boundary misaligned for subdomain {sub.id}")
        try:
            ratio = _integer_ratio(left.dt, right.dt, f"time step between subdomains {left.id} and {right.id}")
        except UnsupportedMeshError as exc:
            raise ConfigurationError(str(exc)) from exc
        ratios[(patch.left, patch.right)] = ratio
    return ratios


@dataclass(frozen=True)
class DofMap:
    """Enumeration of cell and flux unknowns for one slab.

    Cell unknowns come first, field-major, then by element id (subdomain, level,
    lexicographic index). Flux unknowns follow, family-major, then by face id.
    Interface sub-faces are single faces, so both sides share one DOF. Global
    ids are slab-major.
    """

    fields: tuple[str, ...]
    families: tuple[str, ...]
    n_elements: int
    n_faces: int
    n_interior_faces: int
    n_boundary_faces: int
    n_interface_faces: int
    n_slabs: int

    @property
    def n_cell_unknowns(self) -> int:
        """Cell unknowns per slab."""
        return self.n_elements * len(self.fields)

    @property
    def n_flux_unknowns(self) -> int:
        """Flux unknowns per slab."""
        return self.n_faces * len(self.families)

    @property
    def total(self) -> int:
        """Unknowns per slab."""
        return self.n_cell_unknowns + self.n_flux_unknowns

    @property
    def total_all_slabs(self) -> int:
        """Unknowns over the whole run."""
        return self.total * self.n_slabs

    def field_index(self, field: int | str) -> int:
        """Position of a field given by name or index."""
        return self.fields.index(field) if isinstance(field, str) else field

    def family_index(self, family: int | str) -> int:
        """Position of a flux family given by name or index."""
        return self.families.index(family) if isinstance(family, str) else family

    def cell_dof(self, element: int, field: int | str = 0) -> int:
        """Slab-local id of a cell unknown."""
        return self.field_index(field) * self.n_elements + element

    def flux_dof(self, face: int, family: int | str = 0) -> int:
        """Slab-local id of a flux unknown."""
        return self.n_cell_unknowns + self.family_index(family) * self.n_faces + face

    def global_dof(self, local: int, slab: int) -> int:
        """Run-wide id of a slab-local unknown."""
        return slab * self.total + local


def enumerate_dofs(
    mesh: SpaceTimeMesh, fields: tuple[str, ...], families: tuple[str, ...] = ("u",)
) -> DofMap:
    """Enumerate the unknowns of a mesh.

    Args:
        mesh: A built mesh.
        fields: Names of the cell fields, e.g. ``("p", "c")``.
        families: Names of the flux families carried by every face.

    Returns:
        The DOF map.
    """
    if not fields or not families:
        msg = "at least one field and one flux family are required"
        raise ConfigurationError(msg)
    kinds = mesh.arrays.face_kind
    return DofMap(
        fields=tuple(fields),
        families=tuple(families),
        n_elements=mesh.n_elements,
        n_faces=mesh.n_faces,
        n_interior_faces=int(np.count_nonzero(kinds == FACE_KIND_CODES[FaceKind.INTERIOR])),
        n_boundary_faces=int(np.count_nonzero(kinds == FACE_KIND_CODES[FaceKind.BOUNDARY])),
        n_interface_faces=int(np.count_nonzero(kinds == FACE_KIND_CODES[FaceKind.INTERFACE])),
        n_slabs=mesh.n_slabs,
    )
