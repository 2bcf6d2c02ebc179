"""Per-cell vertex optimization: linearized tangency terms + plane terms + proximal step.

Each assigned node (u, |s|) wants the local mesh tangent to the sphere of
radius |s| around u. Per step, the closest point t on the current local fan is
found, the closest point q on the sphere fixed, and the squared mismatch is
measured only along the direction d from u to q. Writing t in barycentric
coordinates makes each term linear in the fan apex x; together with the edge
plane terms and a proximal pull toward the previous position, every step is an
exact 3x3 solve of a strictly convex quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import AssignedSample
from .grid import CellId, EdgeId
from .mesh import FaceIntersection, TriMesh, build_local_mesh, closest_on_triangles

# A sample whose closest fan point coincides with the node itself has no
# usable direction; it is skipped for that step only.
DEGENERATE_REL = 1e-12
DEGENERATE_ABS = 1e-15


@dataclass(frozen=True)
class LinearTerm:
    alpha: float  # barycentric weight of the fan apex at the closest point
    d: np.ndarray  # unit direction from the node toward its sphere point
    rhs_const: float  # d . (q - beta*v1 - gamma*v2)


@dataclass
class InnerResult:
    x_new: np.ndarray
    iterations_used: int
    converged: bool
    final_step_norm: float


@dataclass
class LocalMeshContext:
    """Everything needed to rebuild a cell's fan as its apex moves."""

    cell: CellId
    fis: list[FaceIntersection]
    hermite: dict[EdgeId, object]


def sphere_closest_point(u, s_abs: float, t) -> tuple[np.ndarray, np.ndarray]:
    """Closest point q on the sphere (center u, radius s_abs) to t, and the
    unit direction d from u toward q. Raises ValueError when t ~ u."""
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    dv = t - u
    norm = float(np.linalg.norm(dv))
    if norm < max(DEGENERATE_REL * s_abs, DEGENERATE_ABS):
        raise ValueError("query point coincides with sphere center")
    d = dv / norm
    return u + s_abs * d, d


def linearize_terms(local: TriMesh, samples: list[AssignedSample]) -> list[LinearTerm]:
    """One linear tangency term per assigned sample against the local fan.

    The fan apex is vertex 0 of every triangle, so the apex's barycentric
    weight is the first coordinate of the winning triangle. Degenerate samples
    (node on the fan) are omitted.
    """
    if len(local.triangles) == 0 or not samples:
        return []
    a, b, c = local.corners
    nt = len(local.triangles)
    out = []
    for smp in samples:
        q_rep = np.repeat(smp.u.reshape(1, 3), nt, axis=0)
        pts, bary, d2 = closest_on_triangles(q_rep, a, b, c)
        win = int(np.argmin(d2))
        t_pt = pts[win]
        try:
            q, d = sphere_closest_point(smp.u, smp.s_abs, t_pt)
        except ValueError:
            continue
        w0, w1, w2 = bary[win]
        tri = local.triangles[win]
        fixed = w1 * local.vertices[tri[1]] + w2 * local.vertices[tri[2]]
        out.append(
            LinearTerm(alpha=float(w0), d=d, rhs_const=float(np.dot(d, q - fixed)))
        )
    return out


def solve_inner_step(
    terms: list[LinearTerm],
    hermite_terms: list[tuple[np.ndarray, np.ndarray]],
    x_prev,
    w_H: float,
    mu: float,
) -> np.ndarray:
    """Exact minimizer of the step's quadratic model.

        sum_j (alpha_j d_j.x - rhs_j)^2
      + w_H sum_e (n_e.x - n_e.h_e)^2
      + mu ||x - x_prev||^2

    mu > 0 keeps the 3x3 system strictly positive definite.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    lhs = mu * np.eye(3)
    rhs = mu * x_prev.copy()
    for t in terms:
        ad = t.alpha * t.d
        lhs += np.outer(ad, ad)
        rhs += ad * t.rhs_const
    for h, n in hermite_terms:
        n = np.asarray(n, dtype=float)
        lhs += w_H * np.outer(n, n)
        rhs += w_H * n * float(np.dot(n, h))
    return np.linalg.solve(lhs, rhs)


def quadratic_objective(terms, hermite_terms, x_prev, w_H, mu, x) -> float:
    """Value of the step's quadratic model at x (for verification)."""
    x = np.asarray(x, dtype=float)
    val = mu * float(np.dot(x - x_prev, x - x_prev))
    for t in terms:
        r = t.alpha * float(np.dot(t.d, x)) - t.rhs_const
        val += r * r
    for h, n in hermite_terms:
        r = float(np.dot(n, x)) - float(np.dot(n, h))
        val += w_H * r * r
    return val


def optimize_cell(
    cell: CellId,
    x_start,
    context: LocalMeshContext,
    samples: list[AssignedSample],
    hermite_terms: list[tuple[np.ndarray, np.ndarray]],
    config,
) -> InnerResult:
    """Inner loop for one cell: rebuild fan, re-linearize, solve, until the
    step norm drops below tau or the iteration cap is hit.

    The vertex is free to leave the cell box. With no usable distance terms a
    step degrades gracefully to plane + proximal terms only.
    """
    x = np.asarray(x_start, dtype=float).copy()
    tau = config.effective_tau_value if hasattr(config, "effective_tau_value") else None
    # config may be a ReconstructionConfig (grid-dependent tau resolved by caller)
    tau = config.tau if tau is None else tau
    if tau is None:
        raise ValueError("config.tau must be resolved before optimize_cell")
    if config.pseudo_sdf_interior:
        samples = [s for s in samples if s.s_sign > 0]

    step = 0.0
    r = 0
    converged = False
    while r < config.max_inner:
        local = build_local_mesh(x, cell, context.hermite, context.fis)
        terms = linearize_terms(local, samples)
        w_eff = config.w_hermite
        if config.normalize_wh_by_count:
            w_eff *= max(1, len(terms))
        x_new = solve_inner_step(terms, hermite_terms, x, w_eff, config.mu)
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        r += 1
        if step <= tau:
            converged = True
            break
    return InnerResult(x_new=x, iterations_used=r, converged=converged, final_step_norm=step)


# -- batched lockstep engine ------------------------------------------------
#
# The pipeline optimizes every cell of an outer iteration simultaneously: all
# fans share the structure (apex, fixed, fixed), so samples and triangles
# flatten into global arrays and each lockstep round is a handful of
# vectorized operations plus one batched 3x3 solve. Cells whose step norm
# drops below tau leave the active set.


@dataclass
class BatchedCells:
    """Flattened per-outer-iteration state for the lockstep inner loop.

    Triangle t is (x[tri_cell[t]], tri_a[t], tri_b[t]); sample s belongs to
    cell smp_cell[s]. pair_s/pair_t enumerate every (sample, triangle) pair
    within the same cell, ordered by sample then triangle.
    """

    m: int
    tri_cell: np.ndarray  # (T,)
    tri_a: np.ndarray  # (T, 3)
    tri_b: np.ndarray  # (T, 3)
    smp_cell: np.ndarray  # (S,)
    smp_u: np.ndarray  # (S, 3)
    smp_sabs: np.ndarray  # (S,)
    pair_s: np.ndarray  # (P,)
    pair_t: np.ndarray  # (P,)
    hermite_nn: np.ndarray  # (m, 3, 3) sum of n n^T per cell
    hermite_rhs: np.ndarray  # (m, 3) sum of (n.h) n per cell


def make_pairs(smp_cell, tri_counts, tri_offsets):
    """Pair index arrays for samples against their own cell's triangles."""
    per_sample = tri_counts[smp_cell]
    total = int(per_sample.sum())
    starts = np.concatenate([[0], np.cumsum(per_sample)[:-1]]).astype(np.int64)
    pair_s = np.repeat(np.arange(len(smp_cell), dtype=np.int64), per_sample)
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, per_sample)
    pair_t = tri_offsets[smp_cell[pair_s]] + within
    return pair_s, pair_t


def _segment_first_min(pair_s, d2, seg_changes):
    """Index of the first minimal entry per contiguous pair_s segment."""
    starts = np.flatnonzero(seg_changes)
    mins = np.minimum.reduceat(d2, starts)
    best = np.flatnonzero(d2 == np.repeat(mins, np.diff(np.append(starts, len(d2)))))
    _, first = np.unique(pair_s[best], return_index=True)
    return best[first]


def run_inner_lockstep(batch: BatchedCells, x0: np.ndarray, w_H, mu, tau, max_inner,
                       normalize_by_count=False):
    """Inner loop over all cells at once.

    Returns ``(x, iterations, converged, final_step)`` with one entry per cell.
    Arithmetic per cell matches :func:`optimize_cell` (same term construction,
    same normal equations).
    """
    m = batch.m
    x = x0.copy()
    iterations = np.zeros(m, dtype=np.int64)
    final_step = np.zeros(m)
    converged = np.zeros(m, dtype=bool)
    active = np.ones(m, dtype=bool)
    eye = np.eye(3)

    for _ in range(max_inner):
        if not active.any():
            break
        act_idx = np.flatnonzero(active)
        sub = np.full(m, -1, dtype=np.int64)
        sub[act_idx] = np.arange(len(act_idx))

        pair_mask = active[batch.smp_cell[batch.pair_s]]
        ps = batch.pair_s[pair_mask]
        pt = batch.pair_t[pair_mask]

        ma = len(act_idx)
        M = np.zeros((ma, 3, 3))
        v = np.zeros((ma, 3))
        nterms = np.zeros(ma)

        if len(ps):
            apex = x[batch.tri_cell[pt]]
            query = batch.smp_u[ps]
            _, bary, d2 = closest_on_triangles(query, apex, batch.tri_a[pt], batch.tri_b[pt])
            seg_changes = np.empty(len(ps), dtype=bool)
            seg_changes[0] = True
            np.not_equal(ps[1:], ps[:-1], out=seg_changes[1:])
            sel = _segment_first_min(ps, d2, seg_changes)

            s_idx = ps[sel]
            w0 = bary[sel, 0]
            t_pt = (
                w0[:, None] * x[batch.tri_cell[pt[sel]]]
                + bary[sel, 1][:, None] * batch.tri_a[pt[sel]]
                + bary[sel, 2][:, None] * batch.tri_b[pt[sel]]
            )
            u = batch.smp_u[s_idx]
            sabs = batch.smp_sabs[s_idx]
            dv = t_pt - u
            norm = np.linalg.norm(dv, axis=1)
            ok = norm >= np.maximum(DEGENERATE_REL * sabs, DEGENERATE_ABS)
            if ok.any():
                sel = sel[ok]
                s_idx = s_idx[ok]
                w0 = w0[ok]
                d = dv[ok] / norm[ok][:, None]
                q = u[ok] + sabs[ok][:, None] * d
                fixed = (
                    bary[sel, 1][:, None] * batch.tri_a[pt[sel]]
                    + bary[sel, 2][:, None] * batch.tri_b[pt[sel]]
                )
                rhs_c = np.einsum("ij,ij->i", d, q - fixed)
                cell_rel = sub[batch.smp_cell[s_idx]]
                ad = w0[:, None] * d
                for i in range(3):
                    for j in range(i, 3):
                        acc = np.bincount(cell_rel, weights=ad[:, i] * ad[:, j], minlength=ma)
                        M[:, i, j] += acc
                        if i != j:
                            M[:, j, i] += acc
                    v[:, i] += np.bincount(cell_rel, weights=ad[:, i] * rhs_c, minlength=ma)
                nterms = np.bincount(cell_rel, minlength=ma).astype(float)

        w_eff = np.full(ma, w_H)
        if normalize_by_count:
            w_eff *= np.maximum(1.0, nterms)
        lhs = (
            M
            + w_eff[:, None, None] * batch.hermite_nn[act_idx]
            + mu * eye[None, :, :]
        )
        rhs = v + w_eff[:, None] * batch.hermite_rhs[act_idx] + mu * x[act_idx]
        x_new = np.linalg.solve(lhs, rhs[..., None])[..., 0]

        step = np.linalg.norm(x_new - x[act_idx], axis=1)
        x[act_idx] = x_new
        iterations[act_idx] += 1
        final_step[act_idx] = step
        done = step <= tau
        converged[act_idx[done]] = True
        active[act_idx[done]] = False

    return x, iterations, converged, final_step
