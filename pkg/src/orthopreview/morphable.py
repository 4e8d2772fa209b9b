"""Procedural linear morphable head model with a skinned jaw.

Coordinates: x lateral (the face is mirror-symmetric about x = 0), y up,
z anterior. Lengths in millimeters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from os import PathLike

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from .geometry import RegionMask, RigidTransform, build_symmetry_pairing, rigid_align
from .mesh import LANDMARK_MIRROR, N_LANDMARKS, SUBNASALE, LandmarkSet, Mesh
from .metrics import SpatialIndex

REGION_NAMES = ("face", "chin", "lower-face")

# grid extent of the frontal half-head
_X_EXTENT = 78.0
_Y_RANGE = (-100.0, 105.0)

# analytic feature points; x < 0 is the subject's right
_LANDMARK_XY = {
    27: (0.0, 35.0), 28: (0.0, 21.0), 29: (0.0, 7.0), 30: (0.0, -8.0),
    31: (-12.0, -18.0), 32: (-6.0, -20.0), 33: (0.0, -21.0),
    36: (-45.0, 30.0), 37: (-38.0, 34.0), 38: (-28.0, 34.0),
    39: (-20.0, 30.0), 40: (-28.0, 26.0), 41: (-38.0, 26.0),
    17: (-55.0, 42.0), 18: (-46.0, 46.0), 19: (-36.0, 48.0), 20: (-26.0, 47.0), 21: (-16.0, 44.0),
    48: (-24.0, -39.0), 49: (-16.0, -33.0), 50: (-7.0, -31.0), 51: (0.0, -31.0),
    59: (-16.0, -45.0), 58: (-7.0, -47.0), 57: (0.0, -47.0),
    60: (-20.0, -39.0), 61: (-8.0, -37.0), 62: (0.0, -37.0),
    67: (-8.0, -41.0), 66: (0.0, -41.0),
}
for _i in range(9):
    _t = -np.pi / 2 + _i * np.pi / 16
    _LANDMARK_XY[_i] = (68.0 * np.sin(_t), 10.0 - 82.0 * np.cos(_t))
_LANDMARK_XY[8] = (0.0, -72.0)


class ModelError(ValueError):
    pass


def _gauss(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def head_height(x, y, features=True):
    """Anterior depth z(x, y) of the frontal head surface.

    Only |x| enters, so the surface is exactly mirror-symmetric.
    """
    ax = np.abs(x)
    q = 1.0 - (ax / 100.0) ** 2 - (y / 170.0) ** 2
    z = 90.0 * np.sqrt(np.maximum(q, 1e-4)) - 90.0
    if not features:
        return z
    z = z + 12.0 * _gauss(ax, y, 0.0, -8.0, 8.0, 8.0)  # nose tip
    z = z + 9.0 * np.exp(-0.5 * (ax / 5.0) ** 2) * np.clip((36.0 - y) / 44.0, 0.0, 1.0) * (y > -8.0)
    z = z + 9.0 * np.exp(-0.5 * (ax / 5.0) ** 2) * (y <= -8.0) * np.exp(-0.5 * ((y + 8.0) / 4.0) ** 2)
    z = z + 5.0 * _gauss(ax, y, 13.0, -12.0, 5.0, 5.0)  # alae
    z = z + 5.5 * _gauss(ax, y, 0.0, -32.0, 22.0, 5.0)  # upper lip
    z = z + 5.0 * _gauss(ax, y, 0.0, -46.0, 20.0, 5.0)  # lower lip
    z = z - 1.5 * _gauss(ax, y, 0.0, -39.0, 22.0, 1.8)  # mouth line
    z = z - 3.0 * _gauss(ax, y, 0.0, -56.0, 22.0, 4.0)  # labiomental fold
    z = z + 6.0 * _gauss(ax, y, 0.0, -70.0, 18.0, 10.0)  # chin
    z = z - 8.0 * _gauss(ax, y, 32.0, 30.0, 12.0, 9.0)  # orbits
    z = z + 3.0 * _gauss(ax, y, 32.0, 45.0, 16.0, 5.0)  # brow ridge
    z = z + 4.0 * _gauss(ax, y, 50.0, 2.0, 16.0, 16.0)  # cheekbones
    return z


def _grid(resolution):
    h = _X_EXTENT / resolution
    ny = int(round((_Y_RANGE[1] - _Y_RANGE[0]) / h)) + 1
    # exact mirror: the -x half is the negation of the +x half
    half = np.arange(1, resolution + 1) * h
    xs = np.concatenate([-half[::-1], [0.0], half])
    ys = _Y_RANGE[0] + np.arange(ny) * h
    return xs, ys


def template_surface(resolution, features=True):
    """Template vertices, triangles and vertex mirror map on a symmetric grid."""
    xs, ys = _grid(resolution)
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys)  # row j = y, column i = x
    Z = head_height(X, Y, features)
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vid = np.arange(nx * ny).reshape(ny, nx)
    mirror = vid[:, ::-1].ravel().copy()
    tris = []
    c = resolution
    for j in range(ny - 1):
        for i in range(nx - 1):
            a, b, cc, d = vid[j, i], vid[j, i + 1], vid[j + 1, i + 1], vid[j + 1, i]
            if i < c:
                tris += [(a, b, cc), (a, cc, d)]
            else:
                tris += [(a, b, d), (b, cc, d)]
    return verts, np.array(tris, dtype=np.int64), mirror


def _smoothing_operator(n, triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    # half self, half neighbour mean
    return 0.5 * sp.identity(n, format="csr") + 0.5 * sp.diags(1.0 / deg) @ adj


def _mirror_field(f, mirror):
    g = f[mirror].copy()
    g[:, 0] = -g[:, 0]
    return g


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Template, orthonormal shape basis with mode scales, jaw skinning and annotations.

    ``basis`` has shape (3n, K) with rows ordered x0, y0, z0, x1, ...;
    decode at zero pose is ``template + (basis * scales) @ code``.
    """

    template: np.ndarray
    triangles: np.ndarray
    basis: np.ndarray
    scales: np.ndarray
    jaw_joint: np.ndarray
    jaw_weights: np.ndarray
    landmark_indices: np.ndarray
    mirror: np.ndarray
    regions: dict
    seed: int = 0
    resolution: int = 0
    _mode_matrix: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("template", "triangles", "basis", "scales", "jaw_joint", "jaw_weights",
                     "landmark_indices", "mirror"):
            a = np.array(getattr(self, name), copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        regs = {k: (v if isinstance(v, RegionMask) else RegionMask.from_vertices(v, self.triangles, self.n_vertices))
                for k, v in self.regions.items()}
        object.__setattr__(self, "regions", regs)
        m = self.basis * self.scales[None, :]
        m.setflags(write=False)
        object.__setattr__(self, "_mode_matrix", m)

    @property
    def n_vertices(self) -> int:
        return len(self.template)

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]

    @property
    def mode_matrix(self):
        """``basis * scales``: maps a code to a flattened vertex displacement."""
        return self._mode_matrix

    def template_mesh(self) -> Mesh:
        return Mesh(self.template, self.triangles)

    def rows(self, vertex_indices):
        """Flattened coordinate rows of the given vertices."""
        v = np.asarray(vertex_indices, dtype=np.int64)
        return (3 * v[:, None] + np.arange(3)[None, :]).ravel()


def build_synthetic_model(seed=0, n_modes=64, resolution=16, mode_scale=3.0, smoothing=None) -> MorphableModel:
    """Build the procedural stand-in head model.

    Even modes are mirror-symmetric displacement fields, odd modes
    antisymmetric; all are orthogonal to rigid motions, as a basis learnt
    from pre-aligned scans would be. Mode ``k`` moves vertices by ``mode_scale * 0.97**k`` mm
    RMS per unit coefficient.
    """
    verts, tris, mirror = template_surface(resolution)
    n = len(verts)
    if n < 500:
        raise ModelError(f"resolution {resolution} gives only {n} vertices (need >= 500)")
    if n_modes < 8:
        raise ModelError("need at least 8 modes")
    if n_modes > 3 * n:
        raise ModelError(f"{n_modes} modes exceed 3n = {3 * n}")

    rng = np.random.default_rng(seed)
    smooth = _smoothing_operator(n, tris)
    iters = smoothing if smoothing is not None else max(20, resolution * resolution)
    fields = rng.standard_normal((n_modes, n, 3))
    for k in range(n_modes):
        f = fields[k]
        for _ in range(iters):
            f = smooth @ f
        sign = 1.0 if k % 2 == 0 else -1.0
        fields[k] = 0.5 * (f + sign * _mirror_field(f, mirror))
    flat = fields.reshape(n_modes, 3 * n).T
    rigid = _rigid_fields(verts)
    flat -= rigid @ (rigid.T @ flat)
    basis = np.empty((3 * n, n_modes))
    for parity in (0, 1):
        q, r = np.linalg.qr(flat[:, parity::2])
        q = q * np.sign(np.diag(r))[None, :]
        basis[:, parity::2] = q
    scales = mode_scale * 0.97 ** np.arange(n_modes) * np.sqrt(n)

    jaw_joint = np.array([0.0, -30.0, -70.0])
    s = np.clip((jaw_joint[1] - verts[:, 1]) / 25.0, 0.0, 1.0)
    jaw_weights = s * s * (3.0 - 2.0 * s)

    landmarks = _place_landmarks(verts, mirror)

    x, y = verts[:, 0], verts[:, 1]
    face = ((x / 64.0) ** 2 + ((y + 2.0) / 93.0) ** 2) <= 1.0
    sub_y = verts[landmarks[SUBNASALE], 1]
    lower = face & (y < sub_y)
    chin = face & (y < -55.0) & (np.abs(x) < 30.0)
    regions = {
        "face": np.flatnonzero(face),
        "lower-face": np.flatnonzero(lower),
        "chin": np.flatnonzero(chin),
    }
    return MorphableModel(verts, tris, basis, scales, jaw_joint, jaw_weights, landmarks, mirror,
                          regions, seed=seed, resolution=resolution)


def _rigid_fields(verts):
    """Orthonormal basis (3n, 6) of infinitesimal translations and rotations
    about a point on the mirror plane; each field has definite parity."""
    c = np.array([0.0, verts[:, 1].mean(), verts[:, 2].mean()])
    r = verts - c
    n = len(verts)
    cols = []
    for axis in np.eye(3):
        cols.append(np.tile(axis, n))
    for axis in np.eye(3):
        cols.append(np.cross(axis, r).ravel())
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def _place_landmarks(verts, mirror):
    xy = verts[:, :2]
    mid = np.flatnonzero(mirror == np.arange(len(verts)))
    idx = np.full(N_LANDMARKS, -1, dtype=np.int64)
    for i, (px, py) in _LANDMARK_XY.items():
        if px == 0.0:
            cand = mid
        elif px < 0.0:
            cand = np.flatnonzero(xy[:, 0] < 0.0)
        else:
            continue
        d = (xy[cand, 0] - px) ** 2 + (xy[cand, 1] - py) ** 2
        idx[i] = cand[np.argmin(d)]
    for i in range(N_LANDMARKS):
        if idx[i] < 0:
            j = LANDMARK_MIRROR[i]
            if idx[j] < 0:
                raise AssertionError(f"landmark {i} has no placed partner")
            idx[i] = mirror[idx[j]]
    return idx


def decode_vertices(model: MorphableModel, codes, jaw_angle=0.0):
    """Vertices for one code (n, 3) or a batch of codes (b, n, 3)."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[-1] != model.n_modes:
        raise ModelError(f"code length {codes.shape[-1]} != {model.n_modes}")
    disp = codes @ model.mode_matrix.T
    v = model.template + disp.reshape(codes.shape[:-1] + (model.n_vertices, 3))
    if jaw_angle != 0.0:
        if abs(jaw_angle) > np.pi / 4:
            raise ModelError("jaw angle beyond +-pi/4")
        c, s = np.cos(jaw_angle), np.sin(jaw_angle)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        rel = v - model.jaw_joint
        moved = rel @ rot.T + model.jaw_joint
        w = model.jaw_weights[:, None]
        v = np.where(w > 0.0, (1.0 - w) * v + w * moved, v)
    return v


def decode(model: MorphableModel, code, jaw_angle=0.0) -> Mesh:
    return Mesh(decode_vertices(model, code, jaw_angle), model.triangles)


def landmark_positions(model: MorphableModel, code) -> LandmarkSet:
    return LandmarkSet(decode_vertices(model, code)[model.landmark_indices])


def region_mask(model: MorphableModel, name: str) -> RegionMask:
    try:
        return model.regions[name]
    except KeyError:
        raise ModelError(f"unknown region {name!r}; expected one of {REGION_NAMES}") from None


@dataclass(frozen=True)
class FitConfig:
    ridge: float = 1e-3
    surface_iterations: int = 3
    surface_weight: float = 0.1
    max_surface_samples: int = 2000
    max_pose_steps: int = 30
    pose_tol: float = 1e-12
    pose: bool = True
    correspondence: str = "nearest"

    def __post_init__(self):
        if self.correspondence not in ("nearest", "index"):
            raise ValueError("correspondence must be 'nearest' or 'index'")


@dataclass(frozen=True)
class FitReport:
    landmark_errors: np.ndarray
    mean_landmark_error: float
    surface_rms: float | None
    iterations: int


def _skew_rows(q):
    """Rows of d(w x q)/dw = -[q]x for every point, shape (3m, 3)."""
    m = len(q)
    out = np.zeros((m, 3, 3))
    out[:, 0, 1], out[:, 0, 2] = q[:, 2], -q[:, 1]
    out[:, 1, 0], out[:, 1, 2] = -q[:, 2], q[:, 0]
    out[:, 2, 0], out[:, 2, 1] = q[:, 1], -q[:, 0]
    return out.reshape(3 * m, 3)


def _joint_solve(model, blocks, rot, trans, ridge, config):
    """Gauss-Newton over a rigid pose and the code.

    ``blocks`` holds ``(source_points, vertex_ids, weight)``; the residual
    ``R s + t - decode(code)[v]`` is linear in the code and in a small
    rotation update, so each step is one ridge-regularised solve.
    """
    k = model.n_modes
    a_blocks = [(model.mode_matrix[model.rows(v)], model.template[v].ravel(), s, w) for s, v, w in blocks]
    if not config.pose:
        lhs = ridge * np.eye(k)
        rhs = np.zeros(k)
        for a, base, s, w in a_blocks:
            lhs += w * (a.T @ a)
            rhs += w * (a.T @ ((s @ rot.T + trans).ravel() - base))
        return rot, trans, np.linalg.solve(lhs, rhs)
    reg = np.zeros(6 + k)
    reg[6:] = ridge
    code = np.zeros(k)
    for _ in range(config.max_pose_steps):
        lhs = np.diag(reg)
        rhs = np.zeros(6 + k)
        for a, base, s, w in a_blocks:
            q = s @ rot.T + trans
            j = np.hstack([_skew_rows(q), np.tile(np.eye(3), (len(q), 1)), -a])
            b = base - q.ravel()
            lhs += w * (j.T @ j)
            rhs += w * (j.T @ b)
        x = np.linalg.solve(lhs, rhs)
        step = Rotation.from_rotvec(x[:3]).as_matrix()
        rot, trans, code = step @ rot, step @ trans + x[3:6], x[6:]
        if np.dot(x[:6], x[:6]) <= config.pose_tol:
            break
    return rot, trans, code


def fit(model: MorphableModel, scan: Mesh, landmarks: LandmarkSet, config: FitConfig = FitConfig()):
    """Encode a scan as a latent code.

    The scan landmarks are first rigidly aligned to the template's, then
    pose and code are refined together; with ``config.pose`` off the scan
    is taken to be in model coordinates already. Optional surface passes add
    nearest-vertex correspondences, or vertex ``i`` to model vertex ``i``
    with ``correspondence="index"`` for scans sharing the model topology
    (the correspondences are then fixed, so one pass suffices). Returns ``(code, transform, report)``
    where ``transform`` maps scan coordinates into model space.
    """
    k = model.n_modes
    lm_idx = model.landmark_indices
    if config.ridge <= 0.0:
        a_lm = model.mode_matrix[model.rows(lm_idx)]
        if 3 * N_LANDMARKS < k or np.linalg.matrix_rank(a_lm) < k:
            raise ModelError("landmark system is rank-deficient; use a ridge weight > 0")
    src = landmarks.points
    xf = rigid_align(src, model.template[lm_idx]) if config.pose else RigidTransform.identity()
    blocks = [(src, lm_idx, 1.0)]
    rot, trans, code = _joint_solve(model, blocks, xf.rotation, xf.translation, config.ridge, config)

    iterations = 0
    surface_rms = None
    if config.surface_iterations > 0:
        by_index = config.correspondence == "index"
        if by_index and len(scan.vertices) != model.n_vertices:
            raise ModelError("index correspondence needs a scan with the model's vertex count")
        pick = np.arange(len(scan.vertices))
        if len(pick) > config.max_surface_samples:
            pick = np.linspace(0, len(pick) - 1, config.max_surface_samples).round().astype(np.int64)
        pts = scan.vertices[pick]
        for _ in range(1 if by_index else config.surface_iterations):
            if by_index:
                nn = pick
            else:
                _, nn = SpatialIndex(decode_vertices(model, code)).query(pts @ rot.T + trans)
            rot, trans, code = _joint_solve(model, blocks + [(pts, nn, config.surface_weight)],
                                            rot, trans, config.ridge, config)
            iterations += 1
        if by_index:
            d = np.linalg.norm(decode_vertices(model, code)[pick] - (pts @ rot.T + trans), axis=1)
        else:
            d, _ = SpatialIndex(decode_vertices(model, code)).query(pts @ rot.T + trans)
        surface_rms = float(np.sqrt(np.mean(d * d)))

    xf = RigidTransform(rot, trans)
    fitted = decode_vertices(model, code)[lm_idx]
    errs = np.linalg.norm(fitted - xf.apply(src), axis=1)
    report = FitReport(errs, float(np.mean(errs)), surface_rms, iterations)
    return code, xf, report


def symmetric_code(code):
    """Zero the antisymmetric (odd) modes."""
    c = np.array(code, dtype=np.float64, copy=True)
    c[..., 1::2] = 0.0
    return c


def chin_pairing(model: MorphableModel):
    return build_symmetry_pairing(model.mirror, region_mask(model, "chin"))


def save_model(model: MorphableModel, path: str | PathLike) -> None:
    """Write the model as whitespace-separated text (format ``MM1``)."""
    n, k = model.n_vertices, model.n_modes
    out = [f"MM1 {n} {k}\n", f"meta {model.seed} {model.resolution}\n"]

    def block(name, arr, fmt=repr):
        arr = np.asarray(arr)
        rows = arr.reshape(len(arr), -1) if arr.ndim > 1 else arr.reshape(-1, 1)
        out.append(f"{name} {rows.shape[0]} {rows.shape[1]}\n")
        for r in rows.tolist():
            out.append(" ".join(fmt(x) for x in r) + "\n")

    block("template", model.template)
    block("triangles", model.triangles, str)
    block("basis", model.basis.T)
    block("scales", model.scales)
    block("jaw_joint", model.jaw_joint.reshape(1, 3))
    block("jaw_weights", model.jaw_weights)
    block("landmarks", model.landmark_indices, str)
    block("mirror", model.mirror, str)
    for name in REGION_NAMES:
        block(f"region:{name}", model.regions[name].indices, str)
    with open(path, "w") as fh:
        fh.write("".join(out))


def load_model(path: str | PathLike) -> MorphableModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "MM1":
        raise ModelError(f"{path}: not an MM1 model file")
    n, k = int(head[1]), int(head[2])
    meta = lines[1].split()
    seed, resolution = int(meta[1]), int(meta[2])
    blocks = {}
    i = 2
    while i < len(lines):
        name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        data = " ".join(lines[i + 1: i + 1 + rows]).split()
        blocks[name] = (data, rows, cols)
        i += 1 + rows

    def f(name):
        data, rows, cols = blocks[name]
        return np.array([float(x) for x in data]).reshape(rows, cols)

    def ints(name):
        data, rows, cols = blocks[name]
        return np.array([int(x) for x in data], dtype=np.int64).reshape(rows, cols)

    basis = f("basis").T
    if basis.shape != (3 * n, k):
        raise ModelError(f"{path}: basis shape {basis.shape} inconsistent with header")
    return MorphableModel(
        f("template"), ints("triangles"), basis, f("scales").ravel(), f("jaw_joint").ravel(),
        f("jaw_weights").ravel(), ints("landmarks").ravel(), ints("mirror").ravel(),
        {name: ints(f"region:{name}").ravel() for name in REGION_NAMES},
        seed=seed, resolution=resolution,
    )
