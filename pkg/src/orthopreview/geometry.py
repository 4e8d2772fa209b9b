"""Planes, lines, rigid alignment, normals and vertex-region bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import (
    BROW_MID_LEFT,
    BROW_MID_RIGHT,
    INNER_EYE_LEFT,
    INNER_EYE_RIGHT,
    LandmarkSet,
    Mesh,
)

X_AXIS = np.array([1.0, 0.0, 0.0])


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """The set ``{x : normal . x = offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length")
        n = n.copy()
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points):
        p = np.asarray(points, dtype=np.float64)
        n = self.normal
        return p[..., 0] * n[0] + p[..., 1] * n[1] + p[..., 2] * n[2] - self.offset


def point_plane_distance(p, plane: Plane) -> float:
    return float(abs(plane.signed_distance(p)))


def point_line_distance(p, a, b) -> float:
    """Distance from ``p`` to the infinite line through ``a`` and ``b``."""
    p, a, b = (np.asarray(x, dtype=np.float64) for x in (p, a, b))
    u = b - a
    nu = np.linalg.norm(u)
    if nu <= 1e-9:
        raise GeometryError("line endpoints coincide")
    return float(np.linalg.norm(np.cross(p - a, u)) / nu)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


def rigid_align(source, target) -> RigidTransform:
    """Least-squares rotation and translation taking ``source`` onto ``target``.

    Kabsch solution restricted to proper rotations; no scaling.
    """
    s = source.points if isinstance(source, LandmarkSet) else np.asarray(source, dtype=np.float64)
    t = target.points if isinstance(target, LandmarkSet) else np.asarray(target, dtype=np.float64)
    if s.shape != t.shape:
        raise GeometryError("point sets differ in shape")
    cs, ct = s.mean(axis=0), t.mean(axis=0)
    s0, t0 = s - cs, t - ct
    sv = np.linalg.svd(s0, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise GeometryError("singular configuration: source points are collinear")
    u, _, vt = np.linalg.svd(t0.T @ s0)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return RigidTransform(r, ct - r @ cs)


def midsagittal_normals(brow_mid, eye_mid):
    """Vectorised plane normals from brow and inner-eye midpoints, shape (..., 3).

    The normal is the x-axis with its component along the midpoint line
    removed, so the plane contains both midpoints. Coincident midpoints
    give the x-axis itself.
    """
    m1 = np.asarray(brow_mid, dtype=np.float64)
    m2 = np.asarray(eye_mid, dtype=np.float64)
    d = m2 - m1
    nd = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2)
    coincide = nd <= 1e-9
    u = d / np.where(coincide, 1.0, nd)[..., None]
    n = -u * u[..., :1]
    n[..., 0] += 1.0
    nn = np.sqrt(n[..., 0] ** 2 + n[..., 1] ** 2 + n[..., 2] ** 2)
    bad = (nn <= 1e-9) & ~coincide
    if np.any(bad):
        raise GeometryError("x-axis is parallel to the midpoint line")
    n = n / np.where(coincide, 1.0, nn)[..., None]
    n[coincide] = X_AXIS
    offset = n[..., 0] * m1[..., 0] + n[..., 1] * m1[..., 1] + n[..., 2] * m1[..., 2]
    return n, offset


def fit_midsagittal_plane(landmarks: LandmarkSet) -> Plane:
    p = landmarks.points
    brow = 0.5 * (p[BROW_MID_RIGHT] + p[BROW_MID_LEFT])
    eye = 0.5 * (p[INNER_EYE_RIGHT] + p[INNER_EYE_LEFT])
    n, off = midsagittal_normals(brow, eye)
    return Plane(n, off)


def triangle_normals(mesh_or_vertices, triangles=None, *, return_degenerate=False):
    """Unit right-hand-rule normals per triangle.

    Triangles with area <= 1e-12 mm^2 get a zero normal; their indices are
    returned as well when ``return_degenerate`` is set.
    """
    if isinstance(mesh_or_vertices, Mesh):
        v, t = mesh_or_vertices.vertices, mesh_or_vertices.triangles
    else:
        v, t = np.asarray(mesh_or_vertices, dtype=np.float64), np.asarray(triangles)
    c = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    norm = np.linalg.norm(c, axis=1)
    degenerate = 0.5 * norm <= 1e-12
    out = np.zeros_like(c)
    ok = ~degenerate
    out[ok] = c[ok] / norm[ok, None]
    if return_degenerate:
        return out, np.flatnonzero(degenerate)
    return out


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Sorted vertex set plus the triangles lying entirely inside it."""

    indices: np.ndarray
    triangles: np.ndarray

    @classmethod
    def from_vertices(cls, indices, triangles, n_vertices=None):
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        tri = np.asarray(triangles, dtype=np.int64)
        if n_vertices is None:
            n_vertices = int(tri.max()) + 1 if tri.size else (int(idx.max()) + 1 if idx.size else 0)
        if idx.size and (idx[0] < 0 or idx[-1] >= n_vertices):
            raise GeometryError("mask index out of range")
        inside = np.zeros(n_vertices, dtype=bool)
        inside[idx] = True
        tri_ids = np.flatnonzero(inside[tri].all(axis=1)) if tri.size else np.zeros(0, dtype=np.int64)
        idx.setflags(write=False)
        tri_ids.setflags(write=False)
        return cls(idx, tri_ids)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, i):
        j = np.searchsorted(self.indices, i)
        return j < len(self.indices) and self.indices[j] == i

    def issubset(self, other: "RegionMask") -> bool:
        return bool(np.isin(self.indices, other.indices).all())


@dataclass(frozen=True, eq=False)
class SymmetryPairing:
    pairs: np.ndarray  # (k, 2)
    midline: np.ndarray


def build_symmetry_pairing(mirror, mask: RegionMask) -> SymmetryPairing:
    """Pair each masked vertex with its mirror image.

    ``mirror`` is a vertex mirror map, or any object with a ``mirror``
    attribute holding one.
    """
    mirror = np.asarray(getattr(mirror, "mirror", mirror))
    idx = mask.indices
    partner = mirror[idx]
    outside = ~np.isin(partner, idx)
    if np.any(outside):
        raise GeometryError(
            f"mask is not mirror-closed; offending vertices: {idx[outside].tolist()}"
        )
    mid = idx[partner == idx]
    first = idx < partner
    pairs = np.stack([idx[first], partner[first]], axis=1).reshape(-1, 2)
    pairs.setflags(write=False)
    mid.setflags(write=False)
    return SymmetryPairing(pairs, mid)
