"""Synthetic pair generation by perturbing the upper face and stitching.

A random code perturbation gives a new face; its part above a horizontal
plane through the subnasale is blended onto the lower part of both the
pre- and post-operative faces, so the two share an upper face while
keeping the original surgical change below it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FaceRecord, PatientPair
from .geometry import GeometryError, Plane
from .mesh import SUBNASALE, LandmarkSet, Mesh
from .morphable import FitConfig, ModelError, MorphableModel, decode_vertices, fit

UP = np.array([0.0, 1.0, 0.0])


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    """Stitched faces are built in model coordinates and share its topology,
    so by default they are re-encoded without a rigid pose (``fit_pose``)
    and with vertex-index correspondences (``fit_iterations`` > 0 enables
    the surface term)."""

    split_landmark: int = SUBNASALE
    sigma: float = 0.5
    band: float = 5.0
    tau: float = 2.0
    factor: int = 10
    retries: int = 3
    seed: int = 0
    ridge: float = 1e-3
    fit_iterations: int = 1
    fit_pose: bool = False
    fit_correspondence: str = "index"

    def __post_init__(self):
        if not self.sigma > 0:
            raise AugmentError("sigma must be > 0")
        if self.band < 0:
            raise AugmentError("band must be >= 0")
        if self.factor < 1:
            raise AugmentError("factor must be >= 1")
        if self.retries < 0:
            raise AugmentError("retries must be >= 0")

    def fit_config(self):
        return FitConfig(ridge=self.ridge, surface_iterations=self.fit_iterations, pose=self.fit_pose,
                         correspondence=self.fit_correspondence)


@dataclass
class AugmentReport:
    attempts: int = 0
    generated: int = 0
    rejected_errors: list = field(default_factory=list)
    shortfall: int = 0

    @property
    def rejected(self):
        return len(self.rejected_errors)

    @property
    def rejection_rate(self):
        return self.rejected / self.attempts if self.attempts else 0.0


def split_plane(mesh: Mesh, landmarks: LandmarkSet, config: AugmentConfig = AugmentConfig()) -> Plane:
    """Horizontal plane through the split landmark (``mesh`` is unused but kept
    for symmetry with the other per-face operations)."""
    p = landmarks.points[config.split_landmark]
    return Plane(UP, float(p[1]))


def blend_weights(points, plane: Plane, band):
    """1 above the band, 0 below it (and on the plane when ``band`` is 0)."""
    s = plane.signed_distance(points)
    if band == 0:
        return (s > 0).astype(np.float64)
    t = np.clip((s + band) / (2.0 * band), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def stitch(upper: Mesh, lower: Mesh, plane: Plane, band: float) -> Mesh:
    """Blend ``upper`` onto ``lower`` across a smoothstep band about ``plane``.

    The band is located on ``upper``'s vertices, so two stitches sharing an
    upper source blend identically; fully saturated vertices are copied
    verbatim from their source.
    """
    if not upper.same_topology(lower):
        raise AugmentError("stitch sources differ in topology")
    lam = blend_weights(upper.vertices, plane, band)[:, None]
    u, l = upper.vertices, lower.vertices
    v = np.where(lam == 1.0, u, np.where(lam == 0.0, l, l + lam * (u - l)))
    return Mesh(v, lower.triangles, lower.colors)


def _refit(model, mesh, config):
    lm = LandmarkSet(mesh.vertices[model.landmark_indices])
    code, _, report = fit(model, mesh, lm, config.fit_config())
    code.setflags(write=False)
    return FaceRecord(mesh, lm, code, report)


def generate_pair(model: MorphableModel, codes, config: AugmentConfig, rng, pair_id="aug", source=None):
    """One stitched synthetic pair from real ``(code_pre, code_post)``.

    Returns ``(pair, errors)``; ``pair`` is None when either re-encoding
    misses the landmark tolerance ``tau`` or fitting fails.
    """
    code_pre, code_post = (np.asarray(c, dtype=np.float64) for c in codes)
    if code_pre.shape != (model.n_modes,) or code_post.shape != (model.n_modes,):
        raise AugmentError("codes must have length K")
    xi = config.sigma * rng.standard_normal(model.n_modes)
    gen_v = decode_vertices(model, code_pre + xi)
    gen = Mesh(gen_v, model.triangles)
    plane = split_plane(gen, LandmarkSet(gen_v[model.landmark_indices]), config)
    pre = stitch(gen, Mesh(decode_vertices(model, code_pre), model.triangles), plane, config.band)
    post = stitch(gen, Mesh(decode_vertices(model, code_post), model.triangles), plane, config.band)
    try:
        rec_pre = _refit(model, pre, config)
        rec_post = _refit(model, post, config)
    except (GeometryError, ModelError, np.linalg.LinAlgError):
        return None, (np.inf, np.inf)
    errs = (rec_pre.report.mean_landmark_error, rec_post.report.mean_landmark_error)
    if not max(errs) <= config.tau:
        return None, errs
    return PatientPair(pair_id, rec_pre, rec_post, "synthetic", source), errs


def draw_rng(seed, pair_index, draw, retry):
    """Generator for one draw, independent of how many other draws run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(pair_index, draw, retry)))


def augment_dataset(model: MorphableModel, pairs, config: AugmentConfig = AugmentConfig()):
    """``factor`` synthetic pairs per source pair, retrying rejected draws.

    Returns ``(synthetic_pairs, report)``; a draw still rejected after
    ``retries`` extra attempts counts towards the shortfall.
    """
    if not pairs:
        raise AugmentError("no source pairs to augment")
    out = []
    report = AugmentReport()
    for i, src in enumerate(pairs):
        for j in range(config.factor):
            for r in range(config.retries + 1):
                report.attempts += 1
                pair, errs = generate_pair(model, (src.pre.code, src.post.code), config,
                                           draw_rng(config.seed, i, j, r), f"{src.id}-s{j:02d}", src.id)
                if pair is not None:
                    out.append(pair)
                    report.generated += 1
                    break
                report.rejected_errors.append(float(max(errs)))
            else:
                report.shortfall += 1
    return out, report
