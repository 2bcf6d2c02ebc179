"""Batch selection and the sample-to-cell assignment via mesh closest points.

Every grid node carries a tangency constraint (a sphere of radius |s| around
the node). Each outer iteration selects a batch of nodes, finds the closest
point on the current global mesh for each, and hands the node to the cell
owning that closest point, unless the node is too far away to be trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ReconstructionConfig
from .grid import CellId, SdfGrid
from .mesh import ClosestPointIndex, QuadMesh


@dataclass(frozen=True)
class AssignedSample:
    u: np.ndarray  # node position
    s_abs: float
    s_sign: int
    node_index: int


def select_batch(grid: SdfGrid, config: ReconstructionConfig, iteration: int) -> np.ndarray:
    """Node indices considered this outer iteration, in ascending order.

    With a narrow band of half-width n, only nodes with |s| within n cell
    diagonals qualify. When more candidates exist than ``batch_size``, a
    uniform subset is drawn; the draw depends only on the seed and the
    iteration number.
    """
    if config.narrow_band is not None:
        band = config.narrow_band * grid.spacing * np.sqrt(3.0)
        candidates = np.flatnonzero(np.abs(grid.values) <= band)
    else:
        candidates = np.arange(grid.node_count)
    if candidates.size <= config.batch_size:
        return candidates
    rng = np.random.default_rng([config.rng_seed, iteration])
    picked = rng.choice(candidates, size=config.batch_size, replace=False)
    return np.sort(picked)


def _owner_cells(global_mesh: QuadMesh, tri_quad, grid: SdfGrid, tri_idx, bary) -> np.ndarray:
    """Flat cell index owning each closest point.

    The owning cell is the quad corner with the largest barycentric mass at
    the closest point; exact ties go to the lowest flat cell index.
    """
    nx, ny, _ = grid.dims
    quad_idx = tri_quad[tri_idx]
    quads = global_mesh.quads[quad_idx]  # (n, 4) vertex ids

    n = len(tri_idx)
    masses = np.zeros((n, 4))
    even = tri_idx % 2 == 0  # triangle (q0, q1, q2); odd is (q0, q2, q3)
    masses[even, 0] = bary[even, 0]
    masses[even, 1] = bary[even, 1]
    masses[even, 2] = bary[even, 2]
    odd = ~even
    masses[odd, 0] = bary[odd, 0]
    masses[odd, 2] = bary[odd, 1]
    masses[odd, 3] = bary[odd, 2]

    cell_arr = np.array(
        [c.i + (nx - 1) * (c.j + (ny - 1) * c.k) for c in global_mesh.vertex_cells],
        dtype=np.int64,
    )
    corner_flats = cell_arr[quads]  # (n, 4)
    mmax = masses.max(axis=1, keepdims=True)
    tied = masses == mmax
    return np.where(tied, corner_flats, np.iinfo(np.int64).max).min(axis=1)


def assign_arrays(
    batch: np.ndarray,
    grid: SdfGrid,
    index: ClosestPointIndex,
    global_mesh: QuadMesh,
    workers: int = 1,
):
    """Vectorized assignment; returns flat arrays plus the raw query distances.

    Returns ``(kept, owner_flat, dist)`` where ``kept`` is a boolean mask over
    the batch (outlier rule: d <= cell diagonal + |s|), ``owner_flat`` the flat
    cell index per kept node, and ``dist`` the batch's closest distances.
    """
    u = grid.node_positions(batch)
    s_abs = np.abs(grid.values[batch])
    dist, _, tri_idx, bary = index.query(u, workers=workers)
    kept = dist <= grid.spacing * np.sqrt(3.0) + s_abs
    owner = _owner_cells(
        global_mesh, index.mesh.tri_quad, grid, tri_idx[kept], bary[kept]
    )
    return kept, owner, dist


def assign_samples(
    batch: np.ndarray,
    grid: SdfGrid,
    index: ClosestPointIndex,
    global_mesh: QuadMesh,
    workers: int = 1,
) -> dict[CellId, list[AssignedSample]]:
    """Assign batch nodes to the interesting cells owning their closest points.

    Nodes farther from the mesh than one cell diagonal plus their own |s| are
    dropped as outliers.
    """
    nx, ny, _ = grid.dims
    kept, owner_flat, _ = assign_arrays(batch, grid, index, global_mesh, workers)
    kept_nodes = batch[kept]
    s = grid.values[kept_nodes]
    u = grid.node_positions(kept_nodes)

    out: dict[CellId, list[AssignedSample]] = {}
    ncx = nx - 1
    ncxy = (nx - 1) * (ny - 1)
    for node, flat, sval, pos in zip(kept_nodes, owner_flat, s, u):
        cell = CellId(int(flat % ncx), int((flat // ncx) % (ny - 1)), int(flat // ncxy))
        out.setdefault(cell, []).append(
            AssignedSample(
                u=pos,
                s_abs=float(abs(sval)),
                s_sign=-1 if sval <= 0 else 1,  # zeros count as inside
                node_index=int(node),
            )
        )
    return out
