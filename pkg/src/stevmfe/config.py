"""JSON run configuration: parsing into typed records and complete validation."""

import json
import logging
import math
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from stevmfe.errors import ConfigurationError
from stevmfe.fields import FORMATS, read_scalar_field
from stevmfe.models import (
    BoundaryCondition,
    BoundaryKind,
    CapillaryParams,
    FluidProps,
    InitialData,
    ManufacturedForcing,
    ModelKind,
    ModelProblem,
    RelPermParams,
    UnitSystem,
    WellKind,
    WellSpec,
)
from stevmfe.solver import SolverSettings
from stevmfe.stmesh import MeshSpec, Subdomain

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class OutputSettings:
    """Where and how snapshots are written."""

    directory: Path = Path("output")
    formats: tuple[str, ...] = ("csv",)
    snapshot_every: int = 1


@dataclass(frozen=True)
class ConvergenceSettings:
    """Manufactured-solution refinement study on the unit square.

    ``levels`` are coarse cells per unit length; the fine box
    ``[0, fine_extent[0]] x [0, fine_extent[1]]`` is refined ``refinement``
    times in space and time.
    """

    levels: tuple[int, ...] = (10, 20, 40)
    refinement: int = 4
    fine_extent: tuple[float, float] = (0.4, 0.4)
    c1: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """A validated run description."""

    model: ModelProblem
    solver: SolverSettings
    mesh: MeshSpec | None = None
    output: OutputSettings = field(default_factory=OutputSettings)
    convergence: ConvergenceSettings = field(default_factory=ConvergenceSettings)
    source: Path | None = None

    def require_mesh(self) -> MeshSpec:
        """The mesh block, which a simulation run needs.

        Raises:
            ConfigurationError: If the config has no mesh block.
        """
        if self.mesh is None:
            msg = "mesh: required to run a simulation"
            raise ConfigurationError(msg)
        return self.mesh


def _mapping(value: Any, path: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        msg = f"{path}: expected an object, got {type(value).__name__}"
        raise ConfigurationError(msg)
    return value


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float) or not math.isfinite(value):
        msg = f"{path}: expected a finite number, got {value!r}"
        raise ConfigurationError(msg)
    return float(value)


def _integer(value: Any, path: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        msg = f"{path}: expected an integer >= {minimum}, got {value!r}"
        raise ConfigurationError(msg)
    return value


def _vector(value: Any, path: str, length: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, list) or not value:
        msg = f"{path}: expected a list of numbers"
        raise ConfigurationError(msg)
    if length is not None and len(value) != length:
        msg = f"{path}: expected {length} values, got {len(value)}"
        raise ConfigurationError(msg)
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _record[T](cls: type[T], data: Any, path: str, **converted: Any) -> T:
    """Build a flat dataclass from an object, rejecting unknown keys and non-numbers."""
    mapping = _mapping(data, path)
    declared = {f.name: f for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(mapping) - set(declared))
    if unknown:
        msg = f"{path}.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    values: dict[str, Any] = {}
    for name, value in mapping.items():
        if name in converted:
            continue
        if declared[name].type is float:
            values[name] = _number(value, f"{path}.{name}")
        elif declared[name].type is bool and not isinstance(value, bool):
            msg = f"{path}.{name}: expected true or false"
            raise ConfigurationError(msg)
        else:
            values[name] = value
    values.update(converted)
    missing = [
        name
        for name, spec in declared.items()
        if name not in values and spec.default is MISSING and spec.default_factory is MISSING
    ]
    if missing:
        msg = f"{path}.{missing[0]}: required"
        raise ConfigurationError(msg)
    return cls(**values)


def _enum[E](enum: type[E], value: Any, path: str) -> E:
    try:
        return enum(value)  # type: ignore[call-arg]
    except ValueError:
        choices = ", ".join(str(member) for member in enum)  # type: ignore[attr-defined]
        msg = f"{path}: {value!r} is not one of {choices}"
        raise ConfigurationError(msg) from None


def _field_files(data: dict[str, Any], path: str, base: Path, n_cells: int) -> list[FloatArray]:
    unknown = sorted(set(data) - {"files", "log_scale"})
    if unknown:
        msg = f"{path}.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    files = data.get("files")
    if not isinstance(files, list) or not files or not all(isinstance(f, str) for f in files):
        msg = f"{path}.files: expected a list of file names"
        raise ConfigurationError(msg)
    log_scale = data.get("log_scale")
    return [read_scalar_field(base / name, n_cells, log_scale=log_scale) for name in files]


def _permeability(value: Any, path: str, base: Path, n_cells: int, dim: int) -> FloatArray:
    if isinstance(value, dict):
        columns = _field_files(value, path, base, n_cells)
        if len(columns) not in (1, dim):
            msg = f"{path}.files: expected 1 or {dim} files, got {len(columns)}"
            raise ConfigurationError(msg)
        perm = np.column_stack(columns * (dim if len(columns) == 1 else 1))
    elif isinstance(value, list):
        perm = np.tile(np.asarray(_vector(value, path, dim)), (n_cells, 1))
    else:
        perm = np.full((n_cells, dim), _number(value, path))
    if np.any(perm <= 0):
        msg = f"{path}: permeability must be > 0"
        raise ConfigurationError(msg)
    return perm


def _porosity(value: Any, path: str, base: Path, n_cells: int) -> FloatArray:
    if isinstance(value, dict):
        columns = _field_files(value, path, base, n_cells)
        if len(columns) != 1:
            msg = f"{path}.files: expected exactly one file"
            raise ConfigurationError(msg)
        poro = columns[0]
    else:
        poro = np.full(n_cells, _number(value, path))
    if np.any(poro <= 0) or np.any(poro > 1):
        msg = f"{path}: porosity must lie in (0, 1]"
        raise ConfigurationError(msg)
    return poro


def _subdomain(data: Any, path: str, dim: int, base: Path) -> Subdomain:
    mapping = _mapping(data, path)
    allowed = {"id", "origin", "extent", "cells", "dt", "permeability", "porosity"}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        msg = f"{path}.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    for key in ("id", "origin", "extent", "cells", "dt"):
        if key not in mapping:
            msg = f"{path}.{key}: required"
            raise ConfigurationError(msg)
    cells_value = mapping["cells"]
    if not isinstance(cells_value, list) or len(cells_value) != dim:
        msg = f"{path}.cells: expected {dim} integers"
        raise ConfigurationError(msg)
    cells = tuple(_integer(v, f"{path}.cells[{i}]") for i, v in enumerate(cells_value))
    n_cells = math.prod(cells)
    dt = _number(mapping["dt"], f"{path}.dt")
    if dt <= 0:
        msg = f"{path}.dt: must be > 0, got {dt}"
        raise ConfigurationError(msg)
    return Subdomain(
        id=_integer(mapping["id"], f"{path}.id", minimum=0),
        origin=_vector(mapping["origin"], f"{path}.origin", dim),
        extent=_vector(mapping["extent"], f"{path}.extent", dim),
        cells=cells,
        dt=dt,
        permeability=_permeability(mapping.get("permeability", 1.0), f"{path}.permeability", base, n_cells, dim),
        porosity=_porosity(mapping.get("porosity", 1.0), f"{path}.porosity", base, n_cells),
    )


def _mesh(data: Any, base: Path) -> MeshSpec:
    mapping = _mapping(data, "mesh")
    unknown = sorted(set(mapping) - {"origin", "extent", "t_end", "slab_length", "thickness", "subdomains"})
    if unknown:
        msg = f"mesh.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    for key in ("origin", "extent", "t_end", "subdomains"):
        if key not in mapping:
            msg = f"mesh.{key}: required"
            raise ConfigurationError(msg)
    origin = _vector(mapping["origin"], "mesh.origin")
    dim = len(origin)
    if dim not in (1, 2):
        msg = f"mesh.origin: only 1 or 2 spatial dimensions are supported, got {dim}"
        raise ConfigurationError(msg)
    subdomains = mapping["subdomains"]
    if not isinstance(subdomains, list) or not subdomains:
        msg = "mesh.subdomains: expected a non-empty list"
        raise ConfigurationError(msg)
    slab_length = mapping.get("slab_length")
    thickness = _number(mapping.get("thickness", 1.0), "mesh.thickness")
    t_end = _number(mapping["t_end"], "mesh.t_end")
    if t_end <= 0 or thickness <= 0:
        msg = "mesh: t_end and thickness must be > 0"
        raise ConfigurationError(msg)
    return MeshSpec(
        origin=origin,
        extent=_vector(mapping["extent"], "mesh.extent", dim),
        t_end=t_end,
        subdomains=tuple(_subdomain(s, f"mesh.subdomains[{i}]", dim, base) for i, s in enumerate(subdomains)),
        slab_length=None if slab_length is None else _number(slab_length, "mesh.slab_length"),
        thickness=thickness,
    )


def _well(data: Any, position: int) -> WellSpec:
    path = f"model.wells[{position}]"
    mapping = _mapping(data, path)
    index = mapping.get("index")
    if not isinstance(index, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in index):
        msg = f"{path}.index: expected a list of integers"
        raise ConfigurationError(msg)
    well_index = mapping.get("well_index")
    return _record(
        WellSpec,
        mapping,
        path,
        index=tuple(index),
        kind=_enum(WellKind, mapping.get("kind"), f"{path}.kind"),
        subdomain=_integer(mapping.get("subdomain"), f"{path}.subdomain", minimum=0),
        well_index=None if well_index is None else _number(well_index, f"{path}.well_index"),
        name=str(mapping.get("name", f"well{position}")),
    )


def _boundary(data: Any) -> dict[str, BoundaryCondition]:
    conditions = {}
    for name, value in _mapping(data, "model.boundary").items():
        path = f"model.boundary.{name}"
        mapping = dict(_mapping(value, path))
        kind = _enum(BoundaryKind, mapping.pop("type", "no_flow"), f"{path}.type")
        conditions[name] = _record(BoundaryCondition, mapping, path, kind=kind)
    return conditions


def _model(data: Any) -> ModelProblem:
    mapping = _mapping(data, "model")
    allowed = {
        "kind", "units", "water", "oil", "diffusion", "relative_permeability", "capillary_pressure",
        "wells", "boundary", "initial", "forcing", "source",
    }  # fmt: skip
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        msg = f"model.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    kind = _enum(ModelKind, mapping.get("kind"), "model.kind")
    wells = mapping.get("wells", [])
    if not isinstance(wells, list):
        msg = "model.wells: expected a list"
        raise ConfigurationError(msg)

    if "capillary_pressure" in mapping:
        raw = mapping["capillary_pressure"]
        capillary = None if raw is None else _record(CapillaryParams, raw, "model.capillary_pressure")
    else:
        capillary = CapillaryParams() if kind is ModelKind.TWO_PHASE else None
    oil = mapping.get("oil")
    if oil is None and kind is ModelKind.TWO_PHASE:
        msg = "model.oil: required for the two_phase model"
        raise ConfigurationError(msg)
    forcing = mapping.get("forcing")

    problem = ModelProblem(
        kind=kind,
        units=_enum(UnitSystem, mapping.get("units", "dimensionless"), "model.units"),
        water=_record(FluidProps, mapping.get("water", {}), "model.water"),
        oil=None if oil is None else _record(FluidProps, oil, "model.oil"),
        diffusion=_number(mapping.get("diffusion", 0.0), "model.diffusion"),
        relperm=_record(RelPermParams, mapping.get("relative_permeability", {}), "model.relative_permeability"),
        capillary=capillary,
        wells=tuple(_well(w, i) for i, w in enumerate(wells)),
        boundary=_boundary(mapping.get("boundary", {})),
        initial=_record(InitialData, mapping.get("initial", {}), "model.initial"),
        forcing=None if forcing is None else _record(ManufacturedForcing, forcing, "model.forcing"),
        source=_number(mapping.get("source", 0.0), "model.source"),
    )
    problem.validate("model")
    return problem


def _solver(data: Any, kind: ModelKind) -> SolverSettings:
    mapping = _mapping(data, "solver")
    unknown = sorted(set(mapping) - {"tolerance", "max_iterations", "saturation_clamp", "capillary_factor"})
    if unknown:
        msg = f"solver.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    defaults = SolverSettings.for_model(kind)
    tolerance = _number(mapping.get("tolerance", defaults.tolerance), "solver.tolerance")
    if tolerance <= 0:
        msg = f"solver.tolerance: must be > 0, got {tolerance}"
        raise ConfigurationError(msg)
    clamp = mapping.get("saturation_clamp", defaults.saturation_clamp)
    if clamp is not None and _number(clamp, "solver.saturation_clamp") <= 0:
        msg = f"solver.saturation_clamp: must be > 0, got {clamp}"
        raise ConfigurationError(msg)
    factor = mapping.get("capillary_factor", defaults.capillary_factor)
    if factor is not None and _number(factor, "solver.capillary_factor") <= 1:
        msg = f"solver.capillary_factor: must be > 1, got {factor}"
        raise ConfigurationError(msg)
    return SolverSettings(
        tolerance=tolerance,
        max_iterations=_integer(mapping.get("max_iterations", defaults.max_iterations), "solver.max_iterations"),
        saturation_clamp=None if clamp is None else float(clamp),
        capillary_factor=None if factor is None else float(factor),
    )


def _output(data: Any, base: Path) -> OutputSettings:
    mapping = _mapping(data, "output")
    unknown = sorted(set(mapping) - {"directory", "formats", "snapshot_every"})
    if unknown:
        msg = f"output.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    formats = mapping.get("formats", ["csv"])
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        msg = f"output.formats: expected a subset of {list(FORMATS)}, got {formats!r}"
        raise ConfigurationError(msg)
    directory = Path(str(mapping.get("directory", "output")))
    return OutputSettings(
        directory=directory if directory.is_absolute() else base / directory,
        formats=tuple(formats),
        snapshot_every=_integer(mapping.get("snapshot_every", 1), "output.snapshot_every"),
    )


def _convergence(data: Any) -> ConvergenceSettings:
    mapping = _mapping(data, "convergence")
    unknown = sorted(set(mapping) - {"levels", "refinement", "fine_extent", "c1"})
    if unknown:
        msg = f"convergence.{unknown[0]}: unknown key"
        raise ConfigurationError(msg)
    levels_value = mapping.get("levels", [10, 20, 40])
    if not isinstance(levels_value, list) or not levels_value:
        msg = "convergence.levels: expected a non-empty list of integers"
        raise ConfigurationError(msg)
    levels = tuple(_integer(v, f"convergence.levels[{i}]") for i, v in enumerate(levels_value))
    if any(b <= a for a, b in zip(levels, levels[1:], strict=False)):
        msg = "convergence.levels: must be strictly increasing"
        raise ConfigurationError(msg)
    fine_extent = _vector(mapping.get("fine_extent", [0.4, 0.4]), "convergence.fine_extent", 2)
    if any(not 0 < e < 1 for e in fine_extent):
        msg = "convergence.fine_extent: each side must lie in (0, 1)"
        raise ConfigurationError(msg)
    for n in levels:
        for e in fine_extent:
            if abs(e * n - round(e * n)) > 1e-9:
                msg = f"convergence.fine_extent: {e} is not a whole number of cells at level {n}"
                raise ConfigurationError(msg)
    return ConvergenceSettings(
        levels=levels,
        refinement=_integer(mapping.get("refinement", 4), "convergence.refinement"),
        fine_extent=(fine_extent[0], fine_extent[1]),
        c1=_number(mapping.get("c1", 1.0), "convergence.c1"),
    )


def _check_wells(problem: ModelProblem, mesh: MeshSpec) -> None:
    subdomains = {sub.id: sub for sub in mesh.subdomains}
    for position, well in enumerate(problem.wells):
        path = f"model.wells[{position}]"
        sub = subdomains.get(well.subdomain)
        if sub is None:
            msg = f"{path}.subdomain: no subdomain with id {well.subdomain}"
            raise ConfigurationError(msg)
        if len(well.index) != sub.dim or any(not 0 <= i < n for i, n in zip(well.index, sub.cells, strict=True)):
            msg = f"{path}.index: {list(well.index)} outside subdomain {sub.id} with cells {list(sub.cells)}"
            raise ConfigurationError(msg)


def parse_config(document: Any, base: Path = Path()) -> RunConfig:
    """Validate a decoded JSON document and build the run records.

    Args:
        document: Decoded JSON.
        base: Directory against which relative file names resolve.

    Returns:
        The run configuration.

    Raises:
        ConfigurationError: On the first invalid field, named by its dotted path.
        IngestionError: If a referenced scalar-field file is malformed.
    """
    mapping = _mapping(document, "config")
    unknown = sorted(set(mapping) - {"mesh", "model", "solver", "output", "convergence"})
    if unknown:
        msg = f"{unknown[0]}: unknown top-level key"
        raise ConfigurationError(msg)
    if "model" not in mapping:
        msg = "model: required"
        raise ConfigurationError(msg)
    model = _model(mapping["model"])
    mesh = _mesh(mapping["mesh"], base) if "mesh" in mapping else None
    if mesh is not None:
        _check_wells(model, mesh)
        needs_2d = model.forcing is not None or model.initial.manufactured
        if needs_2d and len(mesh.origin) != 2:
            msg = "model.forcing: the manufactured solution is two-dimensional"
            raise ConfigurationError(msg)
    return RunConfig(
        model=model,
        solver=_solver(mapping.get("solver", {}), model.kind),
        mesh=mesh,
        output=_output(mapping.get("output", {}), base),
        convergence=_convergence(mapping.get("convergence", {})),
    )


def load_config(path: Path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises:
        ConfigurationError: If the file is missing, not JSON or invalid.
        IngestionError: If a referenced scalar-field file is malformed.
    """
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        msg = f"{path}: cannot read configuration: {exc.strerror}"
        raise ConfigurationError(msg) from exc
    except json.JSONDecodeError as exc:
        msg = f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"
        raise ConfigurationError(msg) from exc
    config = parse_config(document, path.parent)
    logger.info("Loaded %s model configuration from %s", config.model.kind, path)
    return replace(config, source=path)
