"""Quad/tri meshes, exact closest-point queries, and the per-cell local fans.

The global mesh connects the four cell vertices around each interior
sign-changing edge into a quad, wound so normals point from negative (inside)
to positive (outside) values. Local meshes are open triangle fans around one
cell vertex, built from that cell's edge samples and the points where the
global mesh crosses the cell's face planes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConsistencyError
from .grid import CellId, EdgeId, SdfGrid

FACE_PLANE_TOL = 1e-9  # relative to spacing


@dataclass
class QuadMesh:
    vertices: np.ndarray  # (nv, 3)
    quads: np.ndarray  # (nq, 4) vertex indices
    quad_edges: list[EdgeId]  # grid edge that spawned each quad
    vertex_cells: list[CellId]  # owning cell of each vertex

    def vertex_of_cell(self) -> dict[CellId, int]:
        return {c: i for i, c in enumerate(self.vertex_cells)}


@dataclass
class TriMesh:
    vertices: np.ndarray  # (nv, 3)
    triangles: np.ndarray  # (nt, 3) vertex indices
    tri_quad: Optional[np.ndarray] = None  # source quad per triangle

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.triangles
        v = self.vertices
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]


@dataclass(frozen=True)
class FaceIntersection:
    p: np.ndarray  # point on one of the cell's face planes
    relevant_edge: EdgeId  # edge of the quad whose boundary produced it
    cell: CellId


def build_global_mesh(
    grid: SdfGrid,
    cell_vertices: dict[CellId, np.ndarray],
    edge_to_cells: dict[EdgeId, list[CellId]],
) -> QuadMesh:
    """One quad per interior sign-changing edge, from the owning cells' vertices.

    Vertices are ordered counterclockwise as seen from the edge endpoint with
    positive value, so normals point outward for negative-inside fields. Edges
    with fewer than 4 incident cells (grid boundary) produce no quad.
    """
    cells = sorted(
        cell_vertices,
        key=lambda c: c.i + (grid.dims[0] - 1) * (c.j + (grid.dims[1] - 1) * c.k),
    )
    index_of = {c: i for i, c in enumerate(cells)}
    vertices = np.array([cell_vertices[c] for c in cells], dtype=float).reshape(-1, 3)

    s = grid.snapped_values()
    quads = []
    quad_edges = []
    for edge, ring in edge_to_cells.items():
        if len(ring) != 4:
            continue
        try:
            vid = [index_of[c] for c in ring]
        except KeyError as e:
            raise ConsistencyError(f"no vertex for cell {e.args[0]} on edge {edge}")
        (na, nb) = _edge_node_flats(grid, edge)
        # ring order has normal along +axis; flip when the +axis node is inside
        if s[nb] < 0.0:
            vid = vid[::-1]
        quads.append(vid)
        quad_edges.append(edge)
    quads_arr = (
        np.array(quads, dtype=np.int64) if quads else np.empty((0, 4), dtype=np.int64)
    )
    return QuadMesh(vertices=vertices, quads=quads_arr, quad_edges=quad_edges, vertex_cells=cells)


def _edge_node_flats(grid: SdfGrid, edge: EdgeId) -> tuple[int, int]:
    a, b = grid.edge_nodes(edge)
    return grid.flat_index(*a), grid.flat_index(*b)


def triangulate_quads(q: QuadMesh) -> TriMesh:
    """Split each quad (a, b, c, d) along its first diagonal into (a,b,c), (a,c,d)."""
    nq = len(q.quads)
    tris = np.empty((2 * nq, 3), dtype=np.int64)
    tris[0::2] = q.quads[:, [0, 1, 2]]
    tris[1::2] = q.quads[:, [0, 2, 3]]
    tri_quad = np.repeat(np.arange(nq, dtype=np.int64), 2)
    return TriMesh(vertices=q.vertices.copy(), triangles=tris, tri_quad=tri_quad)


# -- closest point on triangles ------------------------------------------------


def closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to each query p, elementwise.

    All inputs (n, 3). Returns ``(points, bary, dist2)``. Region classification
    follows ClosestPtPointTriangle from Ericson, "Real-Time Collision
    Detection" (2004), extended to return barycentric coordinates; degenerate
    (collinear) triangles fall back to the nearest of the three edges.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    n = p.shape[0]

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    bary = np.zeros((n, 3))
    taken = np.zeros(n, dtype=bool)

    def claim(mask, b0, b1, b2):
        m = mask & ~taken
        bary[m, 0] = b0[m] if isinstance(b0, np.ndarray) else b0
        bary[m, 1] = b1[m] if isinstance(b1, np.ndarray) else b1
        bary[m, 2] = b2[m] if isinstance(b2, np.ndarray) else b2
        taken[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        claim((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)  # vertex a
        claim((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)  # vertex b
        claim((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)  # vertex c
        v_ab = d1 / (d1 - d3)
        claim((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0)  # edge ab
        w_ac = d2 / (d2 - d6)
        claim((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac)  # edge ac
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        claim((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w_bc, w_bc)  # edge bc
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        claim(np.ones(n, dtype=bool), 1.0 - v_in - w_in, v_in, w_in)  # interior

    bad = ~np.all(np.isfinite(bary), axis=1)
    if np.any(bad):
        bary[bad] = _degenerate_triangle_bary(p[bad], a[bad], b[bad], c[bad])

    points = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    diff = points - p
    dist2 = np.einsum("ij,ij->i", diff, diff)
    return points, bary, dist2


def _segment_bary(p, a, b):
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", p - a, ab) / denom
    t = np.where(np.isfinite(t), np.clip(t, 0.0, 1.0), 0.0)
    return t


def _degenerate_triangle_bary(p, a, b, c):
    """Closest point over the three boundary segments, for zero-area triangles."""
    n = p.shape[0]
    best_d2 = np.full(n, np.inf)
    bary = np.zeros((n, 3))
    segs = [(a, b, (0, 1)), (a, c, (0, 2)), (b, c, (1, 2))]
    for s0, s1, (i0, i1) in segs:
        t = _segment_bary(p, s0, s1)
        q = s0 + t[:, None] * (s1 - s0)
        d2 = np.einsum("ij,ij->i", q - p, q - p)
        better = d2 < best_d2
        best_d2[better] = d2[better]
        bary[better] = 0.0
        bary[better, i0] = 1.0 - t[better]
        bary[better, i1] = t[better]
    return bary


class ClosestPointIndex:
    """Exact closest-point queries against a triangle mesh.

    A kd-tree over triangle centroids supplies candidates; an upper bound from
    the nearest few candidates plus the maximum triangle radius bounds a ball
    that provably contains every triangle that could host the true closest
    point. Results match a brute-force scan over all triangles, including the
    tie rule (lowest triangle index).
    """

    def __init__(self, mesh: TriMesh):
        if len(mesh.triangles) == 0:
            raise ValueError("cannot index an empty mesh")
        self.mesh = mesh
        self._a, self._b, self._c = mesh.corners
        cent = (self._a + self._b + self._c) / 3.0
        r2 = np.maximum(
            np.einsum("ij,ij->i", self._a - cent, self._a - cent),
            np.maximum(
                np.einsum("ij,ij->i", self._b - cent, self._b - cent),
                np.einsum("ij,ij->i", self._c - cent, self._c - cent),
            ),
        )
        self._radius = np.sqrt(r2)
        self._rmax = float(self._radius.max())
        self._tree = cKDTree(cent)

    def query(self, q, workers: int = 1):
        """Closest points for queries ``q`` (n, 3).

        Returns ``(dist, points, tri_idx, bary)``.
        """
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n = q.shape[0]
        ntri = len(self.mesh.triangles)
        k = min(8, ntri)
        _, cand = self._tree.query(q, k=k, workers=workers)
        cand = np.atleast_2d(cand.reshape(n, k))

        qi = np.repeat(np.arange(n), k)
        ti = cand.reshape(-1)
        _, _, d2 = closest_on_triangles(q[qi], self._a[ti], self._b[ti], self._c[ti])
        d_ub = np.sqrt(d2.reshape(n, k).min(axis=1))

        radius = (d_ub + self._rmax) * (1.0 + 1e-12) + 1e-300
        balls = self._tree.query_ball_point(q, radius, workers=workers)

        counts = np.fromiter((len(bb) for bb in balls), count=n, dtype=np.int64)
        pair_q = np.repeat(np.arange(n), counts)
        pair_t = np.concatenate([np.asarray(bb, dtype=np.int64) for bb in balls]) if n else np.empty(0, dtype=np.int64)
        pts, bary, d2 = closest_on_triangles(
            q[pair_q], self._a[pair_t], self._b[pair_t], self._c[pair_t]
        )
        # segmented min per query; ties resolved toward the lowest triangle index
        order = np.lexsort((pair_t, d2, pair_q))
        first = np.zeros(n, dtype=np.int64)
        np.cumsum(counts[:-1], out=first[1:])
        sel = order[first]
        return np.sqrt(d2[sel]), pts[sel], pair_t[sel], bary[sel]


def build_spatial_index(m: TriMesh) -> ClosestPointIndex:
    return ClosestPointIndex(m)


def closest_point(index: ClosestPointIndex, q) -> tuple[np.ndarray, int, np.ndarray]:
    """Single-point query: returns (point, triangle index, barycentric weights)."""
    _, pts, tri, bary = index.query(np.asarray(q, dtype=float).reshape(1, 3))
    return pts[0], int(tri[0]), bary[0]


# -- face intersections & local meshes ------------------------------------------


def _shared_face_plane(grid: SdfGrid, ca: CellId, cb: CellId) -> tuple[int, float]:
    """Axis and coordinate of the grid plane between two face-adjacent cells."""
    d = np.subtract(cb, ca)
    axis = int(np.flatnonzero(d)[0])
    coord = grid.origin[axis] + grid.spacing * max(ca[axis], cb[axis])
    return axis, coord


def _segment_plane_point(xi, xj, axis, coord):
    denom = xj[axis] - xi[axis]
    if denom != 0.0:
        t = (coord - xi[axis]) / denom
        if 0.0 <= t <= 1.0:
            return xi + t * (xj - xi)
    # segment misses the plane (vertex escaped its cell): project the midpoint
    p = 0.5 * (xi + xj)
    p = p.copy()
    p[axis] = coord
    return p


def compute_face_intersections(
    global_mesh: QuadMesh,
    cell: CellId,
    cell_vertices: dict[CellId, np.ndarray],
    grid: SdfGrid,
) -> list[FaceIntersection]:
    """Crossings of the cell's quad-boundary edges with its grid face planes.

    For each quad incident to the cell's vertex x, the two quad edges leaving
    x are intersected with the face plane the cell shares with the neighboring
    cell. Results come in pairs per quad: toward the next quad vertex first,
    then toward the previous one (matching the quad's winding).
    """
    out = []
    xi = np.asarray(cell_vertices[cell], dtype=float)
    for qidx, quad_cells in _quads_of_cell(global_mesh, cell):
        edge = global_mesh.quad_edges[qidx]
        pos = quad_cells.index(cell)
        for step in (1, 3):  # next, then previous, in cyclic quad order
            nb = quad_cells[(pos + step) % 4]
            xj = np.asarray(cell_vertices[nb], dtype=float)
            axis, coord = _shared_face_plane(grid, cell, nb)
            p = _segment_plane_point(xi, xj, axis, coord)
            out.append(FaceIntersection(p=p, relevant_edge=edge, cell=cell))
    return out


def _quads_of_cell(global_mesh: QuadMesh, cell: CellId):
    vid = global_mesh.vertex_of_cell()[cell]
    for qidx, quad in enumerate(global_mesh.quads):
        if vid in quad:
            yield qidx, [global_mesh.vertex_cells[v] for v in quad]


def build_local_mesh(
    x,
    cell: CellId,
    hermite: dict[EdgeId, "object"],
    fis: list[FaceIntersection],
) -> TriMesh:
    """Open triangle fan around the cell vertex ``x`` (always vertex 0).

    Each sign-changing edge of the cell contributes its sample point h and the
    two face intersections p_a, p_b of its quad, as triangles (x, p_a, h) and
    (x, h, p_b). Edges with a single intersection give one triangle; edges
    without any are skipped.
    """
    groups: dict[EdgeId, list[np.ndarray]] = {}
    order: list[EdgeId] = []
    for fi in fis:
        if fi.relevant_edge not in groups:
            groups[fi.relevant_edge] = []
            order.append(fi.relevant_edge)
        groups[fi.relevant_edge].append(fi.p)

    verts = [np.asarray(x, dtype=float)]
    tris = []
    for edge in order:
        pts = groups[edge]
        h = np.asarray(hermite[edge].h, dtype=float)
        if len(pts) >= 2:
            ia = len(verts)
            verts.extend([pts[0], h, pts[1]])
            tris.append((0, ia, ia + 1))
            tris.append((0, ia + 1, ia + 2))
        elif len(pts) == 1:
            ia = len(verts)
            verts.extend([pts[0], h])
            tris.append((0, ia, ia + 1))
    return TriMesh(
        vertices=np.array(verts).reshape(-1, 3),
        triangles=np.array(tris, dtype=np.int64).reshape(-1, 3),
    )


# -- OBJ I/O --------------------------------------------------------------------


def write_obj(path, mesh) -> None:
    """Write a QuadMesh or TriMesh as Wavefront OBJ (1-based, 17 significant digits)."""
    faces = mesh.quads if isinstance(mesh, QuadMesh) else mesh.triangles
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for face in faces:
            f.write("f " + " ".join(str(int(i) + 1) for i in face) + "\n")


def read_obj(path) -> TriMesh:
    """Read vertices and faces from an OBJ file; polygons are fan-triangulated."""
    verts = []
    tris = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for a, b in zip(idx[1:-1], idx[2:]):
                    tris.append((idx[0], a, b))
    return TriMesh(
        vertices=np.array(verts, dtype=float).reshape(-1, 3),
        triangles=np.array(tris, dtype=np.int64).reshape(-1, 3),
    )
