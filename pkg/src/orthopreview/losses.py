"""Clinical and data losses on decoded faces, with analytic gradients.

Every kernel here is batched over a leading sample axis; the single-face
functions are thin wrappers so training and the per-face API share one
implementation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, Plane, midsagittal_normals
from .mesh import (
    BROW_MID_LEFT,
    BROW_MID_RIGHT,
    INNER_EYE_LEFT,
    INNER_EYE_RIGHT,
    LOWER_LIP,
    POGONION,
    SUBNASALE,
    UPPER_LIP,
    N_LANDMARKS,
    LandmarkSet,
    Mesh,
)
from .morphable import MorphableModel, chin_pairing, region_mask

CONVEXITY_MARGIN = 3.0  # mm
TERMS = ("L_p", "L_a", "L_f", "L_g")


class LossError(ValueError):
    pass


NORMAL_CHUNK = 32


@dataclass(frozen=True)
class LossWeights:
    alpha_p: float = 5000.0
    alpha_a: float = 5000.0
    alpha_f: float = 1.0
    alpha_g: float = 1.0
    w_normal: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise LossError(f"{k} must be >= 0")

    def as_array(self):
        return np.array([self.alpha_p, self.alpha_a, self.alpha_f, self.alpha_g])


@dataclass(frozen=True)
class LossBreakdown:
    L_p: float
    L_a: float
    L_f: float
    L_g: float
    L_total: float
    grad: np.ndarray


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def line_distance_grad(p, a, b):
    """Distance from p to line(a, b) and its gradients, all batched over (..., 3)."""
    u = b - a
    uu = _dot(u, u)
    if np.any(uu <= 1e-18):
        raise LossError("degenerate s-line: subnasale and pogonion coincide")
    w = p - a
    t = _dot(w, u) / uu
    r = w - t[..., None] * u
    d = np.sqrt(_dot(r, r))
    rhat = r / np.where(d > 0, d, 1.0)[..., None]
    return d, rhat, -(1.0 - t)[..., None] * rhat, -t[..., None] * rhat


def convexity_batch(sub, pog, upper, lower):
    """Mouth-convexity loss for batched landmark points.

    Returns the loss (b,) and gradients (b, 4, 3) ordered as
    subnasale, pogonion, upper lip, lower lip.
    """
    loss = np.zeros(sub.shape[0])
    grad = np.zeros((sub.shape[0], 4, 3))
    for slot, lip in ((2, upper), (3, lower)):
        d, gp, ga, gb = line_distance_grad(lip, sub, pog)
        over = d > CONVEXITY_MARGIN
        excess = np.where(over, d - CONVEXITY_MARGIN, 0.0)
        loss += excess * excess
        k = (2.0 * excess)[:, None]
        grad[:, slot] += k * gp
        grad[:, 0] += k * ga
        grad[:, 1] += k * gb
    return loss, grad


def mouth_convexity_loss(landmarks: LandmarkSet):
    """Penalty on lip midpoints lying more than 3 mm from the s-line.

    Returns ``(value, grad)`` with ``grad`` of shape (4, 3) for the
    subnasale, pogonion, upper-lip and lower-lip points.
    """
    p = landmarks.points
    loss, grad = convexity_batch(p[None, SUBNASALE], p[None, POGONION], p[None, UPPER_LIP], p[None, LOWER_LIP])
    return float(loss[0]), grad[0]


def asymmetry_batch(p, q, normal, offset, direction=None):
    """Asymmetry loss over paired points.

    p, q: (b, k, 3); normal: (b, 3) plane normal; offset: (b,).
    ``direction`` is the unit vector the pair segments should align with
    (defaults to the plane normal). Returns loss (b,), gradients wrt p,
    q, the plane normal and offset, and the number of skipped coincident
    pairs per sample.
    """
    own_direction = direction is None
    direction = normal if own_direction else direction
    n = normal[:, None, :]
    dn = direction[:, None, :]
    m = 0.5 * (p + q)
    s = _dot(m, n) - offset[:, None]
    v = p - q
    lv = np.sqrt(_dot(v, v))
    ok = lv >= 1e-9
    lv_safe = np.where(ok, lv, 1.0)
    c = _dot(v, dn)
    term = np.where(ok, np.abs(s) + 1.0 - np.abs(c) / lv_safe, 0.0)
    sg = np.where(ok, np.sign(s), 0.0)
    sc = np.where(ok, np.sign(c), 0.0)
    g_mid = 0.5 * sg[..., None] * n
    # d(-|c|/|v|)/dv
    g_v = -sc[..., None] * (dn - (c / lv_safe**2)[..., None] * v) / lv_safe[..., None]
    g_normal = np.einsum("bk,bkj->bj", sg, m)
    if own_direction:
        g_normal -= np.einsum("bk,bkj->bj", sc / lv_safe, v)
    g_offset = -sg.sum(axis=1)
    return term.sum(axis=1), g_mid + g_v, g_mid - g_v, g_normal, g_offset, (~ok).sum(axis=1)


def midsagittal_backward(brow_mid, eye_mid, normal, g_normal, g_offset):
    """Pull gradients wrt the plane (normal, offset) back to the two midpoints."""
    g_n = g_normal + g_offset[:, None] * brow_mid
    g_brow = g_offset[:, None] * normal
    d = eye_mid - brow_mid
    nd = np.sqrt(_dot(d, d))
    live = nd > 1e-9
    nd_s = np.where(live, nd, 1.0)
    u = d / nd_s[:, None]
    a = -u * u[:, :1]
    a[:, 0] += 1.0
    na = np.sqrt(_dot(a, a))
    g_a = (g_n - _dot(g_n, normal)[:, None] * normal) / na[:, None]
    g_u = -u[:, :1] * g_a
    g_u[:, 0] -= _dot(g_a, u)
    g_d = (g_u - _dot(g_u, u)[:, None] * u) / nd_s[:, None]
    g_d = np.where(live[:, None], g_d, 0.0)
    return g_brow - g_d, g_d


def asymmetry_loss(mesh, pairing, plane: Plane, direction=None):
    """Asymmetry of paired vertices about a fixed mid-sagittal plane.

    Returns ``(value, grad, skipped)``; ``grad`` has the mesh's vertex
    shape and is nonzero only on paired vertices.
    """
    v = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=np.float64)
    pi, qi = pairing.pairs[:, 0], pairing.pairs[:, 1]
    d = None if direction is None else np.asarray(direction, dtype=np.float64)[None]
    loss, gp, gq, _, _, skipped = asymmetry_batch(
        v[None, pi], v[None, qi], plane.normal[None], np.array([plane.offset]), d
    )
    grad = np.zeros_like(v)
    np.add.at(grad, pi, gp[0])
    np.add.at(grad, qi, gq[0])
    return float(loss[0]), grad, int(skipped[0])


def latent_code_loss(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LossError(f"code shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(_row_sqnorm(diff[None])[0]), 2.0 * diff


def _row_sqnorm(a):
    return np.einsum("ij,ij->i", a, a)


def _cross(a, b):
    # component-major layout: a, b are (..., 3, m)
    return np.stack(
        [a[..., 1, :] * b[..., 2, :] - a[..., 2, :] * b[..., 1, :],
         a[..., 2, :] * b[..., 0, :] - a[..., 0, :] * b[..., 2, :],
         a[..., 0, :] * b[..., 1, :] - a[..., 1, :] * b[..., 0, :]],
        axis=-2,
    )


def normal_term(e1, e2, f1, f2):
    """Mean (1 - cos) between triangle normals of two edge sets.

    Edges are component-major arrays (b, 3, m): ``e1, e2`` predicted,
    ``f1, f2`` ground truth. Returns the mean (b,), gradients wrt e1 and
    e2, and the count of excluded (zero-area) triangles.
    """
    c = _cross(e1, e2)
    cg = _cross(f1, f2)
    lc = np.sqrt((c * c).sum(axis=-2))
    lg = np.sqrt((cg * cg).sum(axis=-2))
    ok = (0.5 * lc > 1e-12) & (0.5 * lg > 1e-12)
    n_ok = ok.sum(axis=-1)
    lc_s = np.where(ok, lc, 1.0)
    npred = c / lc_s[..., None, :]
    ngt = cg / np.where(ok, lg, 1.0)[..., None, :]
    cos = np.clip((npred * ngt).sum(axis=-2), -1.0, 1.0)
    denom = np.maximum(n_ok, 1)
    value = np.where(ok, 1.0 - cos, 0.0).sum(axis=-1) / denom
    h = (ngt - cos[..., None, :] * npred) / lc_s[..., None, :]
    h = np.where(ok[..., None, :], h, 0.0) * (-1.0 / denom)[..., None, None]
    return value, _cross(e2, h), _cross(h, e1), (~ok).sum(axis=-1)


def _edges(v, tris):
    # (b, n, 3) vertices -> two (b, 3, m) edge arrays
    a0 = v[:, tris[:, 0]]
    return (v[:, tris[:, 1]] - a0).transpose(0, 2, 1), (v[:, tris[:, 2]] - a0).transpose(0, 2, 1)


def geometry_batch(pred, gt, vert_ids, tris, w):
    """Point and normal terms between batches of same-topology vertex arrays.

    pred, gt: (b, n, 3); vert_ids: masked vertex indices; tris: (m, 3)
    masked triangles. Returns loss (b,), gradient wrt pred (b, n, 3) and
    the number of excluded triangles per sample.
    """
    b = pred.shape[0]
    grad = np.zeros_like(pred)
    diff = pred[:, vert_ids] - gt[:, vert_ids]
    n_pts = len(vert_ids)
    point = _dot(diff, diff).sum(axis=1) / n_pts
    np.add.at(grad, (slice(None), vert_ids), 2.0 * diff / n_pts)
    if w == 0.0 or len(tris) == 0:
        return point, grad, np.zeros(b, dtype=np.int64)
    e1, e2 = _edges(pred, tris)
    f1, f2 = _edges(gt, tris)
    normal, g1, g2, excluded = normal_term(e1, e2, f1, f2)
    g1 = w * g1.transpose(0, 2, 1)
    g2 = w * g2.transpose(0, 2, 1)
    np.add.at(grad, (slice(None), tris[:, 1]), g1)
    np.add.at(grad, (slice(None), tris[:, 2]), g2)
    np.add.at(grad, (slice(None), tris[:, 0]), -(g1 + g2))
    return point + w * normal, grad, excluded


def geometry_loss(pred: Mesh, gt: Mesh, face, w=1.0):
    """Masked point-to-point plus normal-angle loss between two meshes.

    ``face`` is a RegionMask over the shared topology. Returns
    ``(value, grad, excluded_triangles)``.
    """
    if not pred.same_topology(gt):
        raise LossError("predicted and ground-truth meshes differ in topology")
    tris = pred.triangles[face.triangles]
    loss, grad, excl = geometry_batch(pred.vertices[None], gt.vertices[None], face.indices, tris, w)
    return float(loss[0]), grad[0], int(excl[0])


class LossEvaluator:
    """Batched evaluation of all four terms and their gradient wrt the predicted code.

    Decoding is linear, so everything is expressed directly in code space:
    the point term through the Gram matrix of the face rows, triangle
    edges through one matrix product, and landmark / chin vertices
    through their own small row blocks.
    """

    def __init__(self, model: MorphableModel, weights: LossWeights = LossWeights(), asymmetry_normal="fitted"):
        if asymmetry_normal not in ("fitted", "world_x"):
            raise LossError("asymmetry_normal must be 'fitted' or 'world_x'")
        self.model = model
        self.weights = weights
        self.asymmetry_normal = asymmetry_normal
        K = model.n_modes
        M = model.mode_matrix
        face = region_mask(model, "face")
        pairing = chin_pairing(model)

        fm = M[model.rows(face.indices)]
        self.n_face = len(face.indices)
        self.gram = fm.T @ fm

        tris = model.triangles[face.triangles]
        T = model.template
        Mv = M.reshape(model.n_vertices, 3, K)
        e1_base = (T[tris[:, 1]] - T[tris[:, 0]]).T
        e2_base = (T[tris[:, 2]] - T[tris[:, 0]]).T
        e1_modes = (Mv[tris[:, 1]] - Mv[tris[:, 0]]).transpose(1, 0, 2)  # (3, m, K)
        e2_modes = (Mv[tris[:, 2]] - Mv[tris[:, 0]]).transpose(1, 0, 2)
        self.m_tris = len(tris)
        self.edge_base = np.concatenate([e1_base, e2_base]).reshape(-1)
        self.edge_modes = np.ascontiguousarray(np.concatenate([e1_modes, e2_modes]).reshape(-1, K).T)

        pts = np.concatenate([model.landmark_indices, pairing.pairs[:, 0], pairing.pairs[:, 1]])
        self.n_pairs = len(pairing.pairs)
        self.pt_base = T[pts]
        self.pt_modes = np.ascontiguousarray(M[model.rows(pts)].T)

    def _points(self, codes):
        v = self.pt_base + (codes @ self.pt_modes).reshape(len(codes), -1, 3)
        k = self.n_pairs
        n = N_LANDMARKS
        return v[:, :n], v[:, n:n + k], v[:, n + k:]

    def _edges(self, codes):
        return (self.edge_base + codes @ self.edge_modes).reshape(len(codes), 6, self.m_tris)

    def target_normals(self, gt_codes):
        """Unit triangle normals of ground-truth faces, (b, 3, m); zero where degenerate."""
        e = self._edges(np.atleast_2d(gt_codes))
        c = _cross(e[:, :3], e[:, 3:])
        lc = np.sqrt((c * c).sum(axis=1))
        ok = 0.5 * lc > 1e-12
        return np.where(ok[:, None], c / np.where(ok, lc, 1.0)[:, None], 0.0)

    def _normal_term(self, codes, target):
        """Fused normal term in code space: value (b,), gradient (b, K), excluded count."""
        # small chunks keep the per-triangle temporaries in cache
        parts = [self._normal_chunk(codes[s:s + NORMAL_CHUNK], target[s:s + NORMAL_CHUNK])
                 for s in range(0, len(codes), NORMAL_CHUNK)]
        return tuple(np.concatenate(a) for a in zip(*parts))

    def _normal_chunk(self, codes, target):
        e = self._edges(codes)
        x1, y1, z1, x2, y2, z2 = (e[:, i] for i in range(6))
        cx = y1 * z2 - z1 * y2
        cy = z1 * x2 - x1 * z2
        cz = x1 * y2 - y1 * x2
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        tx, ty, tz = target[:, 0], target[:, 1], target[:, 2]
        ok = (0.5 * lc > 1e-12) & ((tx * tx + ty * ty + tz * tz) > 0.0)
        denom = np.maximum(ok.sum(axis=1), 1)
        inv = np.where(ok, 1.0 / np.where(ok, lc, 1.0), 0.0)
        cos = np.clip((cx * tx + cy * ty + cz * tz) * inv, -1.0, 1.0)
        value = np.where(ok, 1.0 - cos, 0.0).sum(axis=1) / denom
        # d(-cos)/dc scaled by 1/denom
        k = (-1.0 / denom)[:, None] * inv
        cinv = cos * inv
        hx = k * (tx - cinv * cx)
        hy = k * (ty - cinv * cy)
        hz = k * (tz - cinv * cz)
        g = np.empty_like(e)
        g[:, 0] = y2 * hz - z2 * hy
        g[:, 1] = z2 * hx - x2 * hz
        g[:, 2] = x2 * hy - y2 * hx
        g[:, 3] = hy * z1 - hz * y1
        g[:, 4] = hz * x1 - hx * z1
        g[:, 5] = hx * y1 - hy * x1
        return value, g.reshape(len(codes), -1) @ self.edge_modes.T, (~ok).sum(axis=1)

    def evaluate(self, pred_codes, gt_codes, gt_normals=None):
        """Per-sample term values (b, 4), weighted totals (b,) and d total / d pred (b, K).

        ``gt_normals`` may carry precomputed :meth:`target_normals` of the
        ground-truth codes.
        """
        pred_codes = np.atleast_2d(np.asarray(pred_codes, dtype=np.float64))
        gt_codes = np.atleast_2d(np.asarray(gt_codes, dtype=np.float64))
        if pred_codes.shape != gt_codes.shape or pred_codes.shape[1] != self.model.n_modes:
            raise LossError("code batches must both be (b, K)")
        a_p, a_a, a_f, a_g = self.weights.as_array()
        w = self.weights.w_normal
        b = len(pred_codes)
        terms = np.zeros((b, 4))
        lm, p, q = self._points(pred_codes)
        g_lm = np.zeros_like(lm)

        lp, glp = convexity_batch(lm[:, SUBNASALE], lm[:, POGONION], lm[:, UPPER_LIP], lm[:, LOWER_LIP])
        terms[:, 0] = lp
        for slot, li in enumerate((SUBNASALE, POGONION, UPPER_LIP, LOWER_LIP)):
            g_lm[:, li] += a_p * glp[:, slot]

        brow = 0.5 * (lm[:, BROW_MID_RIGHT] + lm[:, BROW_MID_LEFT])
        eye = 0.5 * (lm[:, INNER_EYE_RIGHT] + lm[:, INNER_EYE_LEFT])
        try:
            normal, offset = midsagittal_normals(brow, eye)
        except GeometryError as exc:
            raise LossError(f"L_a: {exc}") from None
        direction = None
        if self.asymmetry_normal == "world_x":
            direction = np.broadcast_to(np.array([1.0, 0.0, 0.0]), normal.shape)
        la, gp, gq, gn, goff, _ = asymmetry_batch(p, q, normal, offset, direction)
        terms[:, 1] = la
        g_brow, g_eye = midsagittal_backward(brow, eye, normal, gn, goff)
        for i in (BROW_MID_RIGHT, BROW_MID_LEFT):
            g_lm[:, i] += 0.5 * a_a * g_brow
        for i in (INNER_EYE_RIGHT, INNER_EYE_LEFT):
            g_lm[:, i] += 0.5 * a_a * g_eye

        diff = pred_codes - gt_codes
        terms[:, 2] = _row_sqnorm(diff)

        gdiff = diff @ self.gram
        point = np.einsum("ij,ij->i", gdiff, diff) / self.n_face
        g_pts = np.concatenate([g_lm, a_a * gp, a_a * gq], axis=1).reshape(b, -1)
        grad = g_pts @ self.pt_modes.T + 2.0 * a_f * diff + (2.0 * a_g / self.n_face) * gdiff
        if w != 0.0:
            target = self.target_normals(gt_codes) if gt_normals is None else gt_normals
            normal_val, g_normal, _ = self._normal_term(pred_codes, target)
            grad += (a_g * w) * g_normal
        else:
            normal_val = np.zeros(b)
        terms[:, 3] = point + w * normal_val
        total = terms @ np.array([a_p, a_a, a_f, a_g])
        return terms, total, grad


def total_loss(model, pred_code, gt_code, weights: LossWeights = LossWeights(), asymmetry_normal="fitted",
               evaluator: LossEvaluator | None = None) -> LossBreakdown:
    """All four terms for one predicted code, weighted sum and its code gradient.

    The mid-sagittal plane is fitted to the predicted face, and the
    gradient includes its dependence on the eyebrow and eye landmarks.
    """
    ev = evaluator or LossEvaluator(model, weights, asymmetry_normal)
    terms, total, grad = ev.evaluate(pred_code, gt_code)
    t = terms[0]
    return LossBreakdown(float(t[0]), float(t[1]), float(t[2]), float(t[3]), float(total[0]), grad[0])
