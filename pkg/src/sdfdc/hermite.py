"""Per-edge surface samples (point + unit normal) and their iterative refinement.

Each interesting grid edge carries one point/normal pair. Initial estimates
come from linear interpolation along the edge and averaged trilinear
gradients; afterwards each pass re-fits a plane through the four surrounding
cell vertices and blends the edge data toward it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, DegenerateNormalError
from .grid import CellId, EdgeId, SdfGrid, trilinear_gradient

# Below this |plane normal . edge direction| the plane/edge intersection is
# unusable and only the normal is updated.
PARALLEL_TOL = 1e-8

# Rank test for the plane fit: second-smallest covariance eigenvalue relative
# to the squared point spread.
RANK_TOL = 1e-12


@dataclass(frozen=True)
class HermiteSample:
    edge: EdgeId
    h: np.ndarray  # point on the edge line, world units
    n: np.ndarray  # unit normal


def estimate_hermite_point(grid: SdfGrid, edge: EdgeId) -> np.ndarray:
    """Linear-interpolation estimate of where the surface crosses the edge.

    With endpoint values s_a, s_b of opposite sign, the zero of the linear
    interpolant is at t = |s_a| / (|s_a| + |s_b|), strictly inside (0, 1).
    """
    (ia, ja, ka), (ib, jb, kb) = grid.edge_nodes(edge)
    s = grid.snapped_values()
    sa = s[grid.flat_index(ia, ja, ka)]
    sb = s[grid.flat_index(ib, jb, kb)]
    if not (sa * sb < 0):
        raise ValueError(f"edge {edge} is not sign-changing (values {sa}, {sb})")
    t = abs(sa) / (abs(sa) + abs(sb))
    a, b = grid.edge_points(edge)
    return (1.0 - t) * a + t * b


def estimate_hermite_normal(
    grid: SdfGrid, edge: EdgeId, h, incident_cells: list[CellId]
) -> np.ndarray:
    """Normalized sum of the trilinear gradients at ``h`` over the incident cells."""
    if not incident_cells:
        raise ValueError(f"edge {edge} has no incident cells")
    g = np.zeros(3)
    for c in incident_cells:
        g += trilinear_gradient(grid, c, h)
    norm = float(np.linalg.norm(g))
    if norm < 1e-12:
        raise DegenerateNormalError(f"gradient sum vanished at edge {edge}")
    return g / norm


def node_gradient_fd(grid: SdfGrid, i: int, j: int, k: int) -> np.ndarray:
    """Finite-difference gradient at a node; central where possible, one-sided at the boundary."""
    g = np.empty(3)
    ijk = [i, j, k]
    for axis in range(3):
        lo = max(ijk[axis] - 1, 0)
        hi = min(ijk[axis] + 1, grid.dims[axis] - 1)
        p_lo = list(ijk)
        p_lo[axis] = lo
        p_hi = list(ijk)
        p_hi[axis] = hi
        dv = grid.values[grid.flat_index(*p_hi)] - grid.values[grid.flat_index(*p_lo)]
        g[axis] = dv / ((hi - lo) * grid.spacing)
    return g


def hermite_for_edge(grid: SdfGrid, edge: EdgeId, incident_cells: list[CellId]) -> HermiteSample:
    """Initial point/normal estimate, falling back to a node finite-difference
    gradient when the summed trilinear gradient vanishes."""
    h = estimate_hermite_point(grid, edge)
    try:
        n = estimate_hermite_normal(grid, edge, h, incident_cells)
    except DegenerateNormalError:
        ijk = np.rint((h - grid.origin) / grid.spacing).astype(int)
        ijk = np.clip(ijk, 0, np.array(grid.dims) - 1)
        g = node_gradient_fd(grid, *ijk)
        norm = float(np.linalg.norm(g))
        if norm < 1e-12:
            # Flat field around a sign change cannot happen on a valid grid;
            # keep the edge usable regardless.
            g = np.zeros(3)
            g[edge.axis] = 1.0
            norm = 1.0
        n = g / norm
    return HermiteSample(edge=edge, h=h, n=n)


def fit_plane_pca(points) -> tuple[np.ndarray, np.ndarray]:
    """Best-fit plane through a small point set.

    Returns ``(normal, centroid)`` where the unit normal is the eigenvector of
    the covariance for its smallest eigenvalue (sign arbitrary). Raises
    :class:`DegenerateFitError` when the points are coincident or collinear so
    no unique plane exists.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    centroid = pts.mean(axis=0)
    d = pts - centroid
    spread2 = float(np.max(np.sum(d * d, axis=1)))
    if spread2 == 0.0:
        raise DegenerateFitError("coincident points")
    cov = d.T @ d / len(pts)
    w, v = np.linalg.eigh(cov)
    if w[1] < RANK_TOL * spread2:
        raise DegenerateFitError("collinear points (rank-deficient covariance)")
    normal = v[:, 0]
    return normal / np.linalg.norm(normal), centroid


def update_hermite(
    grid: SdfGrid, prev: HermiteSample, quad_vertices, w_u: float
) -> HermiteSample:
    """One refinement step of an edge's point/normal from surrounding cell vertices.

    Fits a plane through the (2 to 4) cell vertices that share the edge,
    sign-aligns its normal with the previous one, intersects it with the edge
    line (clamped to the segment) and blends:

        h' = h + w_u * (y - h)          n' = normalize(n_fit + w_u * n_prev)

    Falls back to the previous sample on a degenerate fit, and keeps ``h``
    (updating only the normal) when the plane is nearly parallel to the edge.
    """
    try:
        n_fit, centroid = fit_plane_pca(quad_vertices)
    except DegenerateFitError:
        return prev
    if float(np.dot(n_fit, prev.n)) < 0.0:
        n_fit = -n_fit
    n_new = n_fit + w_u * prev.n
    n_new = n_new / np.linalg.norm(n_new)

    a, b = grid.edge_points(prev.edge)
    length = float(np.linalg.norm(b - a))
    direction = (b - a) / length
    denom = float(np.dot(n_fit, direction))
    if abs(denom) < PARALLEL_TOL:
        return HermiteSample(edge=prev.edge, h=prev.h, n=n_new)
    t = float(np.dot(n_fit, centroid - a)) / denom
    t = min(max(t, 0.0), length)
    y = a + t * direction
    h_new = prev.h + w_u * (y - prev.h)
    return HermiteSample(edge=prev.edge, h=h_new, n=n_new)


def update_hermite_batch(
    edge_a: np.ndarray,
    edge_b: np.ndarray,
    prev_h: np.ndarray,
    prev_n: np.ndarray,
    quad_pts: np.ndarray,
    w_u: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`update_hermite` for interior edges (4 vertices each).

    Arrays: ``edge_a, edge_b, prev_h, prev_n`` are (m, 3); ``quad_pts`` is
    (m, 4, 3). Returns updated ``(h, n)``, both (m, 3). Same policy as the
    scalar version, applied with masks.
    """
    m = prev_h.shape[0]
    if m == 0:
        return prev_h.copy(), prev_n.copy()
    centroid = quad_pts.mean(axis=1)
    d = quad_pts - centroid[:, None, :]
    spread2 = np.max(np.sum(d * d, axis=2), axis=1)
    cov = np.einsum("mpi,mpj->mij", d, d) / quad_pts.shape[1]
    w, v = np.linalg.eigh(cov)
    n_fit = v[:, :, 0]
    ok = (spread2 > 0.0) & (w[:, 1] >= RANK_TOL * spread2)

    flip = np.sum(n_fit * prev_n, axis=1) < 0.0
    n_fit = np.where(flip[:, None], -n_fit, n_fit)
    n_new = n_fit + w_u * prev_n
    n_new = n_new / np.linalg.norm(n_new, axis=1, keepdims=True)

    seg = edge_b - edge_a
    length = np.linalg.norm(seg, axis=1)
    direction = seg / length[:, None]
    denom = np.sum(n_fit * direction, axis=1)
    crossing = np.abs(denom) >= PARALLEL_TOL
    safe_denom = np.where(crossing, denom, 1.0)
    t = np.sum(n_fit * (centroid - edge_a), axis=1) / safe_denom
    t = np.clip(t, 0.0, length)
    y = edge_a + t[:, None] * direction

    h_out = prev_h.copy()
    n_out = prev_n.copy()
    move = ok & crossing
    h_out[move] = prev_h[move] + w_u * (y[move] - prev_h[move])
    n_out[ok] = n_new[ok]
    return h_out, n_out
