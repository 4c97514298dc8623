"""Scalar-field ingestion and field snapshot output (CSV, legacy VTK, gnuplot)."""

import csv
import logging
from collections.abc import Iterable
from pathlib import Path

import frontmatter  # type: ignore[import-untyped]
import numpy as np
import numpy.typing as npt

from stevmfe.errors import IngestionError
from stevmfe.stmesh import SpaceTimeMesh, Subdomain

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

FORMATS = ("csv", "vtk", "gnuplot")


def _header_lines(text: str, content: str) -> int:
    """Lines taken by a front-matter header ahead of ``content``."""
    body = content.rstrip()
    if not body:
        return 0
    start = len(text.rstrip()) - len(body)
    return text[:start].count("\n")


def read_scalar_field(path: Path, expected_count: int, *, log_scale: bool | None = None) -> FloatArray:
    """Read whitespace-separated per-cell values in lexicographic order (x fastest).

    The file may start with a YAML front-matter block; ``log_scale: true`` there
    marks natural-log values. Text after ``#`` on a line is ignored.

    Args:
        path: File to read.
        expected_count: Number of cells the field must cover.
        log_scale: Overrides the header; True exponentiates every value.

    Returns:
        Values in natural units.

    Raises:
        IngestionError: On a missing file, a non-numeric or non-finite token, or
            a count mismatch. Line numbers count from the top of the file.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        msg = f"{path}: cannot read scalar field: {exc.strerror}"
        raise IngestionError(msg) from exc

    metadata, content = frontmatter.parse(text)
    offset = _header_lines(text, content)
    values: list[float] = []
    for line_no, line in enumerate(content.splitlines(), start=offset + 1):
        for token in line.split("#", 1)[0].split():
            try:
                value = float(token)
            except ValueError:
                msg = f"{path}:{line_no}: non-numeric token {token!r}"
                raise IngestionError(msg) from None
            if not np.isfinite(value):
                msg = f"{path}:{line_no}: non-finite value {token!r}"
                raise IngestionError(msg)
            values.append(value)

    if len(values) != expected_count:
        msg = f"{path}: expected {expected_count}, found {len(values)}"
        raise IngestionError(msg)

    decode = log_scale if log_scale is not None else bool(metadata.get("log_scale", False))
    array = np.asarray(values, dtype=np.float64)
    logger.debug("Read %d values from %s (log scale: %s)", len(values), path, decode)
    return np.exp(array) if decode else array


def read_field_csv(path: Path) -> tuple[list[str], FloatArray]:
    """Read back a CSV snapshot as its header and a float table."""
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        rows = [[float(value) for value in row] for row in reader]
    return header, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))


class FieldWriter:
    """Writes the cell fields of converged slabs under one output directory."""

    def __init__(self, mesh: SpaceTimeMesh, fields: tuple[str, ...], directory: Path) -> None:
        """Initialise the writer.

        Args:
            mesh: The mesh the values live on.
            fields: Field names, one per column of the cell arrays.
            directory: Output directory, created if missing.
        """
        self.mesh = mesh
        self.fields = fields
        self.directory = directory
        self.directory.mkdir(parents=True, exist_ok=True)

    def write(self, slab: int, cells: FloatArray, formats: Iterable[str]) -> list[Path]:
        """Write one slab's values in every requested format.

        Args:
            slab: Slab index.
            cells: Cell values ``(n_elements, n_fields)``.
            formats: Any of ``csv``, ``vtk`` and ``gnuplot``.

        Returns:
            The files written.
        """
        written: list[Path] = []
        for fmt in formats:
            if fmt == "csv":
                written.append(self.write_csv(slab, cells))
            elif fmt == "vtk":
                written.extend(self.write_vtk(slab, cells))
            elif fmt == "gnuplot":
                written.extend(self.write_gnuplot(slab, cells))
            else:
                msg = f"unknown output format {fmt!r}"
                raise ValueError(msg)
        return written

    def write_csv(self, slab: int, cells: FloatArray) -> Path:
        """One row per element: subdomain, spatial indices, end time, fields."""
        path = self.directory / f"fields_slab{slab:04d}.csv"
        index_names = ["i", "j"][: self.mesh.dim]
        start = self.mesh.slab_start(slab)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["subdomain", *index_names, "t", *self.fields])
            for element in self.mesh.elements:
                values = [repr(float(v)) for v in cells[element.id]]
                writer.writerow(
                    [element.subdomain, *element.index, repr(start + element.t_hi), *values]
                )
        return path

    def _levels(self, sub: Subdomain) -> range:
        return range(self.mesh.levels(sub.id))

    def _grid(self, sub: Subdomain, cells: FloatArray, level: int) -> FloatArray:
        """Values of one subdomain level shaped ``(n_cells, n_fields)`` in lexicographic order."""
        first = self.mesh.element_id(sub.id, (0,) * sub.dim, level)
        return np.asarray(cells[first : first + sub.n_cells])

    def write_vtk(self, slab: int, cells: FloatArray) -> list[Path]:
        """Legacy ASCII RECTILINEAR_GRID file per subdomain and time level."""
        written = []
        start = self.mesh.slab_start(slab)
        for sub in self.mesh.subdomains:
            coordinates = [
                np.linspace(sub.origin[axis], sub.high[axis], sub.cells[axis] + 1) for axis in range(sub.dim)
            ]
            while len(coordinates) < 3:
                coordinates.append(np.zeros(1))
            for level in self._levels(sub):
                time = start + (level + 1) * sub.dt
                path = self.directory / f"sub{sub.id}_slab{slab:04d}_level{level:02d}.vtk"
                values = self._grid(sub, cells, level)
                lines = [
                    "# vtk DataFile Version 3.0",
                    f"subdomain {sub.id} t={time!r}",
                    "ASCII",
                    "DATASET RECTILINEAR_GRID",
                    "DIMENSIONS " + " ".join(str(len(c)) for c in coordinates),
                ]
                for label, coords in zip("XYZ", coordinates, strict=True):
                    lines.append(f"{label}_COORDINATES {len(coords)} double")
                    lines.append(" ".join(repr(float(c)) for c in coords))
                lines.append(f"CELL_DATA {sub.n_cells}")
                for k, name in enumerate(self.fields):
                    lines.append(f"SCALARS {name} double 1")
                    lines.append("LOOKUP_TABLE default")
                    lines.extend(repr(float(v)) for v in values[:, k])
                path.write_text("\n".join(lines) + "\n", encoding="utf-8")
                written.append(path)
        return written

    def write_gnuplot(self, slab: int, cells: FloatArray) -> list[Path]:
        """Columnar ``x [y] fields`` blocks per subdomain level, blank line between rows."""
        written = []
        for sub in self.mesh.subdomains:
            for level in self._levels(sub):
                path = self.directory / f"sub{sub.id}_slab{slab:04d}_level{level:02d}.dat"
                values = self._grid(sub, cells, level)
                lines = [f"# {' '.join(['x', 'y'][: sub.dim])} {' '.join(self.fields)}"]
                for n, index in enumerate(sub.cell_indices()):
                    if sub.dim == 2 and index[0] == 0 and n > 0:
                        lines.append("")
                    centre = " ".join(repr(c) for c in sub.cell_centre(index))
                    lines.append(centre + " " + " ".join(repr(float(v)) for v in values[n]))
                path.write_text("\n".join(lines) + "\n", encoding="utf-8")
                written.append(path)
        return written


def write_fields(
    mesh: SpaceTimeMesh,
    fields: tuple[str, ...],
    slab: int,
    cells: FloatArray,
    directory: Path,
    formats: Iterable[str] = ("csv",),
) -> list[Path]:
    """Write a converged slab's cell fields; see ``FieldWriter``."""
    return FieldWriter(mesh, fields, directory).write(slab, cells, formats)
