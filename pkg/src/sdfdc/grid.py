"""Uniform signed-distance grids: indexing, interpolation, sign-change topology, file I/O.

Conventions fixed here and relied on everywhere else:

* Node ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)`` and its value is
  stored at flat index ``i + nx * (j + ny * k)`` (x-fastest).
* A cell ``(i, j, k)`` spans nodes ``(i..i+1, j..j+1, k..k+1)``; valid cell
  coordinates run to ``dims - 2``.
* An edge is identified by its base node and an axis; the far node is one step
  along that axis.
* Exact zeros are snapped to a tiny negative value before any sign test, so
  nodes lying on the surface count as inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, GridParseError

AXIS_X, AXIS_Y, AXIS_Z = 0, 1, 2

# Relative sign-snap epsilon: exact zeros become -ZERO_SNAP_REL * bbox diagonal.
ZERO_SNAP_REL = 1e-12

# Points may sit this far (relative to spacing) outside a cell box and still
# be interpolated; Hermite points live exactly on cell faces and must evaluate
# in every incident cell.
CELL_DOMAIN_TOL = 1e-9


class EdgeId(NamedTuple):
    i: int
    j: int
    k: int
    axis: int


class CellId(NamedTuple):
    i: int
    j: int
    k: int


@dataclass(frozen=True)
class SdfGrid:
    """Regular node lattice with one signed distance per node.

    ``values`` is a flat float64 array in x-fastest order. The grid is
    immutable after construction and safe for concurrent reads.
    """

    dims: tuple[int, int, int]
    origin: np.ndarray
    spacing: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"grid dims must be >= 2 per axis, got {dims}")
        if not (self.spacing > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        origin = np.asarray(self.origin, dtype=float).reshape(3).copy()
        values = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if values.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(
                f"value count {values.size} does not match dims {dims}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite value at flat index {bad}")
        origin.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "values", values)

    # -- indexing ----------------------------------------------------------

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def diagonal(self) -> float:
        """World-space diagonal of the node bounding box."""
        nx, ny, nz = self.dims
        return self.spacing * float(
            np.sqrt((nx - 1) ** 2 + (ny - 1) ** 2 + (nz - 1) ** 2)
        )

    def flat_index(self, i, j, k):
        nx, ny, _ = self.dims
        return i + nx * (j + ny * k)

    def node_position(self, i, j, k) -> np.ndarray:
        return self.origin + self.spacing * np.array([i, j, k], dtype=float)

    def node_positions(self, flat=None) -> np.ndarray:
        """Positions of the given flat node indices (all nodes if None), shape (n, 3)."""
        nx, ny, nz = self.dims
        if flat is None:
            flat = np.arange(self.node_count)
        flat = np.asarray(flat)
        i = flat % nx
        j = (flat // nx) % ny
        k = flat // (nx * ny)
        ijk = np.stack([i, j, k], axis=-1).astype(float)
        return self.origin + self.spacing * ijk

    def value_at(self, i, j, k) -> float:
        return float(self.values[self.flat_index(i, j, k)])

    def snapped_values(self) -> np.ndarray:
        """Values with exact zeros replaced by a tiny negative number.

        All sign tests in the package run on these, so a node on the surface
        counts as inside and "differs in sign" stays well defined.
        """
        eps = ZERO_SNAP_REL * self.diagonal
        return np.where(self.values == 0.0, -eps, self.values)

    def edge_nodes(self, edge: EdgeId) -> tuple[tuple, tuple]:
        a = (edge.i, edge.j, edge.k)
        b = list(a)
        b[edge.axis] += 1
        return a, tuple(b)

    def edge_points(self, edge: EdgeId) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.edge_nodes(edge)
        return self.node_position(*a), self.node_position(*b)

    def cell_min_corner(self, cell: CellId) -> np.ndarray:
        return self.node_position(cell.i, cell.j, cell.k)

    def cell_corner_values(self, cell: CellId) -> np.ndarray:
        """The cell's 8 corner values as c[di, dj, dk]."""
        i, j, k = cell
        out = np.empty((2, 2, 2))
        for dk in (0, 1):
            for dj in (0, 1):
                for di in (0, 1):
                    out[di, dj, dk] = self.values[self.flat_index(i + di, j + dj, k + dk)]
        return out

    def values3d(self) -> np.ndarray:
        """Read-only view indexed as v[k, j, i]."""
        nz, ny, nx = self.dims[2], self.dims[1], self.dims[0]
        return self.values.reshape(nz, ny, nx)


# -- trilinear interpolation -------------------------------------------------


def _param_coords(grid: SdfGrid, cell: CellId, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    t = (p - grid.cell_min_corner(cell)) / grid.spacing
    if np.any(t < -CELL_DOMAIN_TOL) or np.any(t > 1.0 + CELL_DOMAIN_TOL):
        raise DomainError(
            f"point {p.tolist()} outside cell {tuple(cell)} "
            f"(parametric {t.tolist()})"
        )
    return t


def trilinear_value(grid: SdfGrid, cell: CellId, p) -> float:
    """Trilinear blend of the cell's 8 corner values at world point ``p``.

    Exact at corners and exactly reproduces fields affine in (x, y, z).
    """
    t = _param_coords(grid, cell, p)
    c = grid.cell_corner_values(cell)
    x, y, z = t
    wx = np.array([1.0 - x, x])
    wy = np.array([1.0 - y, y])
    wz = np.array([1.0 - z, z])
    return float(np.einsum("i,j,k,ijk->", wx, wy, wz, c))


def trilinear_gradient(grid: SdfGrid, cell: CellId, p) -> np.ndarray:
    """Analytic gradient of the trilinear blend, in world units."""
    t = _param_coords(grid, cell, p)
    c = grid.cell_corner_values(cell)
    x, y, z = t
    wx = np.array([1.0 - x, x])
    wy = np.array([1.0 - y, y])
    wz = np.array([1.0 - z, z])
    dw = np.array([-1.0, 1.0])
    gx = np.einsum("i,j,k,ijk->", dw, wy, wz, c)
    gy = np.einsum("i,j,k,ijk->", wx, dw, wz, c)
    gz = np.einsum("i,j,k,ijk->", wx, wy, dw, c)
    return np.array([gx, gy, gz]) / grid.spacing


# -- sign-change topology ------------------------------------------------------


def find_interesting_edges(grid: SdfGrid) -> list[EdgeId]:
    """All grid edges whose endpoint values differ in sign (after zero snap).

    Order is deterministic: axis major, then k, j, i.
    """
    s = grid.snapped_values().reshape(grid.dims[2], grid.dims[1], grid.dims[0])
    out = []
    for axis in (AXIS_X, AXIS_Y, AXIS_Z):
        # shift along the axis in (k, j, i) storage order
        sl = [slice(None)] * 3
        sl[2 - axis] = slice(0, -1)
        sh = [slice(None)] * 3
        sh[2 - axis] = slice(1, None)
        cross = s[tuple(sl)] * s[tuple(sh)] < 0.0
        for k, j, i in np.argwhere(cross):
            out.append(EdgeId(int(i), int(j), int(k), axis))
    return out


def edge_ring_cells(grid: SdfGrid, edge: EdgeId) -> list[CellId]:
    """Cells incident to an edge, in counterclockwise ring order around +axis.

    Interior edges yield 4 cells; cells falling outside the grid are dropped,
    so boundary edges yield 2 (or 1 at a corner). The full ring, in the plane
    of the two other axes (b, c), visits offsets (-1,-1), (0,-1), (0,0), (-1,0);
    a quad with its vertices in this order has normal along +axis.
    """
    nx, ny, nz = grid.dims
    ncells = (nx - 1, ny - 1, nz - 1)
    a = edge.axis
    b, c = (a + 1) % 3, (a + 2) % 3
    base = [edge.i, edge.j, edge.k]
    cells = []
    for db, dc in ((-1, -1), (0, -1), (0, 0), (-1, 0)):
        cc = list(base)
        cc[b] += db
        cc[c] += dc
        if 0 <= cc[0] < ncells[0] and 0 <= cc[1] < ncells[1] and 0 <= cc[2] < ncells[2]:
            cells.append(CellId(*cc))
    return cells


def find_interesting_cells(
    grid: SdfGrid, edges: list[EdgeId]
) -> tuple[list[CellId], dict[EdgeId, list[CellId]], dict[CellId, list[EdgeId]]]:
    """Cells touched by at least one interesting edge, plus both incidence maps.

    ``edge_to_cells[e]`` lists the incident cells in ring order (4 interior,
    fewer at the boundary); ``cell_to_edges[c]`` lists the cell's interesting
    edges in the enumeration order of ``edges``. The cell list is sorted by
    flat cell index (x-fastest).
    """
    nx, ny, _ = grid.dims
    edge_to_cells: dict[EdgeId, list[CellId]] = {}
    cell_to_edges: dict[CellId, list[EdgeId]] = {}
    for e in edges:
        ring = edge_ring_cells(grid, e)
        edge_to_cells[e] = ring
        for c in ring:
            cell_to_edges.setdefault(c, []).append(e)
    cells = sorted(cell_to_edges, key=lambda c: c.i + (nx - 1) * (c.j + (ny - 1) * c.k))
    return cells, edge_to_cells, cell_to_edges


# -- SDFG file format ----------------------------------------------------------
#
# Line 1:  SDFG <text|bin> <nx> <ny> <nz> <ox> <oy> <oz> <spacing>\n
# text:    nx*ny*nz whitespace-separated decimal values, x-fastest
# bin:     nx*ny*nz little-endian IEEE-754 float64 right after the newline


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly and is the canonical header encoding
    return repr(float(x))


def save_grid(grid: SdfGrid, path, variant: str = "bin") -> None:
    """Write a grid in the SDFG format (``variant`` is ``"bin"`` or ``"text"``)."""
    if variant not in ("bin", "text"):
        raise ValueError(f"unknown SDFG variant {variant!r}")
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    header = (
        f"SDFG {variant} {nx} {ny} {nz} "
        f"{_fmt(ox)} {_fmt(oy)} {_fmt(oz)} {_fmt(grid.spacing)}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if variant == "bin":
            f.write(grid.values.astype("<f8").tobytes())
        else:
            f.write("\n".join(_fmt(v) for v in grid.values).encode("ascii"))
            f.write(b"\n")


def load_grid(path) -> SdfGrid:
    """Read an SDFG file; raises :class:`GridParseError` with a byte offset on bad input."""
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise GridParseError("byte 0: missing header line")
    try:
        header = data[:nl].decode("ascii")
    except UnicodeDecodeError as e:
        raise GridParseError(f"byte {e.start}: header is not ASCII") from None
    parts = header.split()
    if len(parts) != 9 or parts[0] != "SDFG":
        raise GridParseError(
            f"byte 0: bad header {header!r}; expected "
            "'SDFG <text|bin> <nx> <ny> <nz> <ox> <oy> <oz> <spacing>'"
        )
    variant = parts[1]
    if variant not in ("bin", "text"):
        raise GridParseError(f"byte 5: unknown variant {variant!r}")
    try:
        nx, ny, nz = (int(p) for p in parts[2:5])
        ox, oy, oz, spacing = (float(p) for p in parts[5:9])
    except ValueError:
        raise GridParseError(f"byte 0: non-numeric field in header {header!r}") from None
    count = nx * ny * nz
    body = data[nl + 1 :]
    body_off = nl + 1

    if variant == "bin":
        need = 8 * count
        if len(body) != need:
            raise GridParseError(
                f"byte {body_off + min(len(body), need)}: expected {need} payload "
                f"bytes for {count} values, found {len(body)}"
            )
        values = np.frombuffer(body, dtype="<f8").astype(float)
    else:
        tokens = body.split()
        if len(tokens) != count:
            raise GridParseError(
                f"byte {body_off}: expected {count} values, found {len(tokens)}"
            )
        try:
            values = np.array([float(t) for t in tokens], dtype=float)
        except ValueError:
            raise GridParseError(f"byte {body_off}: non-numeric value in payload") from None

    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        idx = int(bad[0])
        off = body_off + (8 * idx if variant == "bin" else 0)
        raise GridParseError(f"byte {off}: non-finite value at flat index {idx}")

    try:
        return SdfGrid(dims=(nx, ny, nz), origin=np.array([ox, oy, oz]), spacing=spacing, values=values)
    except ValueError as e:
        raise GridParseError(f"byte 0: {e}") from None
