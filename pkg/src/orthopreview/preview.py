"""Deformation transfer onto scans and latent interpolation sequences."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh, MeshError, save_obj
from .metrics import SpatialIndex, chamfer_distance, hausdorff_distance
from .morphable import MorphableModel, decode


class PreviewError(ValueError):
    pass


@dataclass(frozen=True)
class BarycentricMap:
    """Closest model triangle and barycentric coordinates per scan vertex."""

    triangles: np.ndarray  # (n,) triangle index
    weights: np.ndarray  # (n, 3)
    distances: np.ndarray  # (n,) distance to the closest point

    def __post_init__(self):
        if self.weights.shape != (len(self.triangles), 3):
            raise PreviewError("weights must be (n, 3)")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9):
            raise PreviewError("barycentric weights must be nonnegative and sum to 1")


def closest_point_on_triangles(p, a, b, c):
    """Closest points of ``p`` on triangles ``(a, b, c)``, all (m, 3).

    Region tests over the vertex, edge and face Voronoi regions; returns
    ``(points, weights)`` with barycentric weights clamped to the triangle.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    m = len(p)
    w = np.zeros((m, 3))
    done = np.zeros(m, dtype=bool)

    def dot(x, y):
        return np.einsum("ij,ij->i", x, y)

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    sel = (d1 <= 0) & (d2 <= 0)
    w[sel] = (1.0, 0.0, 0.0)
    done |= sel

    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    sel = ~done & (d3 >= 0) & (d4 <= d3)
    w[sel] = (0.0, 1.0, 0.0)
    done |= sel

    vc = d1 * d4 - d3 * d2
    sel = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = d1[sel] / (d1[sel] - d3[sel])
    w[sel] = np.column_stack([1.0 - t, t, np.zeros_like(t)])
    done |= sel

    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    sel = ~done & (d6 >= 0) & (d5 <= d6)
    w[sel] = (0.0, 0.0, 1.0)
    done |= sel

    vb = d5 * d2 - d1 * d6
    sel = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = d2[sel] / (d2[sel] - d6[sel])
    w[sel] = np.column_stack([1.0 - t, np.zeros_like(t), t])
    done |= sel

    va = d3 * d6 - d5 * d4
    sel = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    t = (d4[sel] - d3[sel]) / ((d4[sel] - d3[sel]) + (d5[sel] - d6[sel]))
    w[sel] = np.column_stack([np.zeros_like(t), 1.0 - t, t])
    done |= sel

    sel = ~done
    denom = 1.0 / (va[sel] + vb[sel] + vc[sel])
    v, u = vb[sel] * denom, vc[sel] * denom
    w[sel] = np.column_stack([1.0 - v - u, v, u])

    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    q = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    return q, w


def _pick(dist2, cand, owner, n):
    """Per owner, the candidate with the smallest distance, ties to the lowest index."""
    order = np.lexsort((cand, dist2, owner))
    first = np.ones(len(order), dtype=bool)
    first[1:] = owner[order][1:] != owner[order][:-1]
    best = order[first]
    if len(best) != n:
        raise PreviewError("closest-triangle search lost a query point")
    return best


def closest_triangles_bruteforce(points, mesh: Mesh):
    """Exhaustive reference: every point against every triangle."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nt = len(mesh.triangles)
    owner = np.repeat(np.arange(len(pts)), nt)
    cand = np.tile(np.arange(nt), len(pts))
    return _closest_from_candidates(pts, mesh, owner, cand)


def _closest_from_candidates(pts, mesh, owner, cand):
    v = mesh.vertices
    tri = mesh.triangles[cand]
    q, w = closest_point_on_triangles(pts[owner], v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]])
    d = q - pts[owner]
    dist2 = np.einsum("ij,ij->i", d, d)
    best = _pick(dist2, cand, owner, len(pts))
    return cand[best], w[best], np.sqrt(dist2[best])


def build_barycentric_map(scan: Mesh, model_mesh: Mesh, k_seed=4) -> BarycentricMap:
    """Exact closest point on ``model_mesh`` for every scan vertex.

    A KD-tree over triangle centroids prunes the search: the closest of the
    ``k_seed`` nearest-centroid triangles bounds the answer, and every
    triangle whose centroid lies within that bound plus the largest
    centroid-to-corner radius is tested exactly.
    """
    if scan.n_vertices == 0 or len(model_mesh.triangles) == 0:
        raise PreviewError("scan and model mesh must be nonempty")
    pts = scan.vertices
    v, t = model_mesh.vertices, model_mesh.triangles
    centroids = v[t].mean(axis=1)
    radius = float(np.linalg.norm(v[t] - centroids[:, None], axis=2).max())
    tree = cKDTree(centroids)
    k = min(k_seed, len(t))
    _, seeds = tree.query(pts, k=k)
    seeds = np.asarray(seeds).reshape(len(pts), k)
    owner = np.repeat(np.arange(len(pts)), k)
    _, _, bound = _closest_from_candidates(pts, model_mesh, owner, seeds.ravel())
    # small slack so rounding in the bound never drops a tied triangle
    hits = tree.query_ball_point(pts, bound + radius + 1e-9 * (1.0 + bound + radius))
    owner = np.repeat(np.arange(len(pts)), [len(h) for h in hits])
    cand = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits])
    tri, w, d = _closest_from_candidates(pts, model_mesh, owner, cand)
    return BarycentricMap(tri, w, d)


def transfer_prediction(scan: Mesh, bmap: BarycentricMap, pre_model: Mesh, post_model: Mesh) -> Mesh:
    """Move each scan vertex by the barycentric blend of the model displacement."""
    if not pre_model.same_topology(post_model):
        raise PreviewError("pre and post model meshes differ in topology")
    if len(bmap.triangles) != scan.n_vertices:
        raise PreviewError("map was built for a different scan")
    disp = post_model.vertices - pre_model.vertices
    d = disp[pre_model.triangles[bmap.triangles]]
    w = bmap.weights
    # relative to the first corner, so equal corner displacements come out exact
    blend = d[:, 0] + w[:, 1:2] * (d[:, 1] - d[:, 0]) + w[:, 2:3] * (d[:, 2] - d[:, 0])
    moved = scan.vertices + blend
    return scan.with_vertices(moved)


def interpolate_codes(model: MorphableModel, code_pre, code_pred, steps) -> list:
    """Decoded faces along the straight line between two codes, endpoints included."""
    if steps < 2:
        raise PreviewError("steps must be >= 2")
    a = np.asarray(code_pre, dtype=np.float64)
    b = np.asarray(code_pred, dtype=np.float64)
    if a.shape != (model.n_modes,) or b.shape != a.shape:
        raise PreviewError("codes must have length K")
    t = np.arange(steps)[:, None] / (steps - 1)
    codes = (1.0 - t) * a + t * b
    codes[0], codes[-1] = a, b
    # one code at a time: a batched product may round differently from decode()
    return [decode(model, c) for c in codes]


def export_sequence(frames, directory: str | PathLike, reference: Mesh | None = None, root=False):
    """Write ``frame_####.obj`` files; with a reference also ``distances.csv``
    (``frame,hd_mm,cd``) and a ``frame_####.dist`` per-vertex distance sidecar."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        ref_index = SpatialIndex(reference.vertices) if reference is not None else None
        for i, frame in enumerate(frames):
            save_obj(frame, out / f"frame_{i:04d}.obj")
            if reference is None:
                continue
            d = ref_index.query(frame.vertices)[0]
            np.savetxt(out / f"frame_{i:04d}.dist", d, fmt="%.17g")
            rows.append((i, hausdorff_distance(frame.vertices, reference.vertices),
                         chamfer_distance(frame.vertices, reference.vertices, root=root)))
        if reference is not None:
            with open(out / "distances.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame", "hd_mm", "cd"])
                for i, hd, cd in rows:
                    w.writerow([i, repr(hd), repr(cd)])
    except OSError as exc:
        raise MeshError(f"cannot write sequence to {out}: {exc}") from exc
