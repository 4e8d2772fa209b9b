"""Triangle meshes, facial landmark sets and their text file formats."""
from __future__ import annotations

from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in millimeters with optional per-vertex RGB color."""

    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        t = _frozen(self.triangles, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise MeshError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshError("degenerate triangle (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.colors is not None:
            c = _frozen(self.colors, np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise MeshError("colors must match vertex count")
            object.__setattr__(self, "colors", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        """Same topology and colors, new positions."""
        return Mesh(vertices, self.triangles, self.colors)

    def same_topology(self, other: "Mesh") -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(self.triangles, other.triangles)


def load_obj(path: str | PathLike) -> Mesh:
    """Read an ASCII Wavefront OBJ file.

    Only ``v`` and ``f`` records are used. Face corners may carry
    ``v/vt/vn`` slashes; polygons are fan-triangulated. Six-float ``v``
    records carry an RGB color.
    """
    verts, colors, tris = [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    vals = [float(x) for x in parts[1:]]
                except ValueError:
                    raise ObjParseError(path, lineno, "non-numeric vertex coordinate") from None
                if len(vals) == 3 or len(vals) == 4:
                    verts.append(vals[:3])
                    colors.append(None)
                elif len(vals) == 6:
                    verts.append(vals[:3])
                    colors.append(vals[3:])
                else:
                    raise ObjParseError(path, lineno, f"vertex record with {len(vals)} values")
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "face with fewer than 3 corners")
                idx = []
                for corner in parts[1:]:
                    head = corner.split("/", 1)[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ObjParseError(path, lineno, f"bad face index {corner!r}") from None
                    if i == 0:
                        raise ObjParseError(path, lineno, "face index 0 is invalid in OBJ")
                    # negative indices are relative to the vertices read so far
                    i = i - 1 if i > 0 else len(verts) + i
                    if i < 0 or i >= len(verts):
                        raise ObjParseError(path, lineno, f"face index {head} out of range")
                    idx.append(i)
                if len(set(idx)) != len(idx):
                    raise ObjParseError(path, lineno, "degenerate face")
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise MeshError(f"{path}: mesh has no vertices")
    has_color = [c is not None for c in colors]
    if any(has_color) and not all(has_color):
        raise MeshError(f"{path}: only some vertices carry colors")
    col = np.array(colors, dtype=np.float64) if all(has_color) else None
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3), col)


def _fmt(x: float) -> str:
    # shortest string that parses back to the same double
    return repr(float(x))


def save_obj(mesh: Mesh, path: str | PathLike) -> None:
    lines = []
    if mesh.colors is None:
        for x, y, z in mesh.vertices.tolist():
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
    else:
        for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), mesh.colors.tolist()):
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)} {_fmt(r)} {_fmt(g)} {_fmt(b)}\n")
    for a, b, c in (mesh.triangles + 1).tolist():
        lines.append(f"f {a} {b} {c}\n")
    Path(path).write_text("".join(lines))


# 68-point facial landmark convention; index 0 starts on the subject's right (-x).
N_LANDMARKS = 68
SUBNASALE = 33
POGONION = 8
UPPER_LIP = 51
LOWER_LIP = 57
INNER_EYE_RIGHT = 39
INNER_EYE_LEFT = 42
BROW_MID_RIGHT = 19
BROW_MID_LEFT = 24

_LANDMARK_PAIRS = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 64), (61, 63), (65, 67)]
)


def _landmark_mirror():
    m = np.arange(N_LANDMARKS)
    for a, b in _LANDMARK_PAIRS:
        m[a], m[b] = b, a
    m.setflags(write=False)
    return m


# left/right correspondence between landmark indices; midline points map to themselves
LANDMARK_MIRROR = _landmark_mirror()


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points, np.float64)
        if p.shape != (N_LANDMARKS, 3):
            raise MeshError(f"expected {N_LANDMARKS}x3 landmarks, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise MeshError("landmarks must be finite")
        object.__setattr__(self, "points", p)

    def __getitem__(self, i):
        return self.points[i]

    @property
    def subnasale(self):
        return self.points[SUBNASALE]

    @property
    def pogonion(self):
        return self.points[POGONION]

    @property
    def upper_lip(self):
        return self.points[UPPER_LIP]

    @property
    def lower_lip(self):
        return self.points[LOWER_LIP]

    @property
    def inner_eye_right(self):
        return self.points[INNER_EYE_RIGHT]

    @property
    def inner_eye_left(self):
        return self.points[INNER_EYE_LEFT]

    @property
    def brow_mid_right(self):
        return self.points[BROW_MID_RIGHT]

    @property
    def brow_mid_left(self):
        return self.points[BROW_MID_LEFT]


def load_landmarks(path: str | PathLike) -> LandmarkSet:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise MeshError(f"{path}:{lineno}: expected 'x y z'")
            try:
                rows.append([float(x) for x in parts])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: non-numeric landmark") from None
    return LandmarkSet(np.array(rows).reshape(-1, 3))


def save_landmarks(landmarks: LandmarkSet, path: str | PathLike) -> None:
    Path(path).write_text(
        "".join(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n" for x, y, z in landmarks.points.tolist())
    )
