import numpy as np
import pytest

from orthopreview.augmentation import (
    AugmentConfig,
    AugmentError,
    augment_dataset,
    blend_weights,
    draw_rng,
    generate_pair,
    split_plane,
    stitch,
)
from orthopreview.dataset import DeformityConfig, generate_synthetic_cohort
from orthopreview.geometry import Plane
from orthopreview.mesh import SUBNASALE, LandmarkSet, Mesh
from orthopreview.morphable import decode_vertices


@pytest.fixture(scope="module")
def pairs(model64):
    return generate_synthetic_cohort(model64, 3, DeformityConfig(seed=5))


class ZeroRng:
    def standard_normal(self, n):
        return np.zeros(n)


def test_split_plane_through_subnasale(model64):
    mesh = model64.template_mesh()
    lm = LandmarkSet(mesh.vertices[model64.landmark_indices])
    plane = split_plane(mesh, lm)
    assert np.array_equal(plane.normal, [0, 1, 0])
    assert plane.signed_distance(lm.points[SUBNASALE]) == 0


def test_blend_weights_profile():
    plane = Plane([0, 1.0, 0], 0.0)
    pts = np.array([[0, y, 0] for y in (-10, -5, 0, 5, 10)], dtype=float)
    assert np.allclose(blend_weights(pts, plane, 5.0), [0, 0, 0.5, 1, 1])
    # band 0 picks the lower source on the plane itself
    assert np.array_equal(blend_weights(pts, plane, 0.0), [0, 0, 0, 1, 1])


def test_stitch_identities(model16, rng):
    a = Mesh(decode_vertices(model16, rng.normal(size=16)), model16.triangles)
    b = Mesh(decode_vertices(model16, rng.normal(size=16)), model16.triangles)
    plane = Plane([0, 1.0, 0], -20.0)
    assert np.array_equal(stitch(a, a, plane, 5.0).vertices, a.vertices)
    s = stitch(a, b, plane, 5.0)
    d = plane.signed_distance(a.vertices)
    assert np.array_equal(s.vertices[d >= 5], a.vertices[d >= 5])
    assert np.array_equal(s.vertices[d <= -5], b.vertices[d <= -5])
    with pytest.raises(AugmentError):
        stitch(a, Mesh(b.vertices), plane, 5.0)


def test_zero_perturbation_reproduces_source(model64, pairs):
    src = pairs[0]
    cfg = AugmentConfig(tau=np.inf)
    pair, _ = generate_pair(model64, (src.pre.code, src.post.code), cfg, ZeroRng())
    assert np.array_equal(pair.pre.mesh.vertices, decode_vertices(model64, src.pre.code))
    pre = Mesh(decode_vertices(model64, src.pre.code), model64.triangles)
    post = Mesh(decode_vertices(model64, src.post.code), model64.triangles)
    plane = split_plane(pre, LandmarkSet(pre.vertices[model64.landmark_indices]))
    assert np.array_equal(pair.post.mesh.vertices, stitch(pre, post, plane, cfg.band).vertices)
    # re-encoding a decoded face recovers its code up to the ridge bias
    assert np.abs(pair.pre.code - src.pre.code).max() < 0.05


def test_band_invariants(model64, pairs):
    src = pairs[1]
    cfg = AugmentConfig(tau=np.inf)
    rng = draw_rng(1, 0, 0, 0)
    xi = cfg.sigma * draw_rng(1, 0, 0, 0).standard_normal(64)
    pair, _ = generate_pair(model64, (src.pre.code, src.post.code), cfg, rng)
    gen = decode_vertices(model64, src.pre.code + xi)
    plane = split_plane(None, LandmarkSet(gen[model64.landmark_indices]))
    d = plane.signed_distance(gen)
    above, below = d >= cfg.band, d <= -cfg.band
    assert above.any() and below.any()
    pre, post = pair.pre.mesh.vertices, pair.post.mesh.vertices
    assert np.array_equal(pre[above], gen[above]) and np.array_equal(post[above], gen[above])
    assert np.array_equal(pre[below], decode_vertices(model64, src.pre.code)[below])
    assert np.array_equal(post[below], decode_vertices(model64, src.post.code)[below])
    assert pair.provenance == "synthetic"


def test_tau_zero_rejects_everything(model64, pairs):
    out, rep = augment_dataset(model64, pairs[:1], AugmentConfig(tau=0.0, factor=2, retries=1))
    assert out == [] and rep.generated == 0 and rep.shortfall == 2
    assert rep.attempts == 4 and rep.rejection_rate == 1.0


def test_tau_infinite_accepts_everything(model64, pairs):
    out, rep = augment_dataset(model64, pairs, AugmentConfig(tau=np.inf, factor=2))
    assert len(out) == 6 and rep.rejected == 0 and rep.shortfall == 0
    assert [p.source for p in out] == [p.id for p in pairs for _ in range(2)]


def test_tau_monotone(model64, pairs):
    counts = []
    for tau in (0.2, 0.5, 1.0, 5.0):
        out, _ = augment_dataset(model64, pairs, AugmentConfig(tau=tau, factor=3, retries=0, seed=9))
        counts.append(len(out))
    assert counts == sorted(counts)


def test_deterministic_and_draw_local(model64, pairs):
    cfg = AugmentConfig(factor=2, tau=np.inf, seed=4)
    a, _ = augment_dataset(model64, pairs, cfg)
    b, _ = augment_dataset(model64, pairs, cfg)
    assert all(np.array_equal(x.pre.code, y.pre.code) and np.array_equal(x.post.code, y.post.code)
               for x, y in zip(a, b))
    # a single draw regenerated on its own matches the batch output
    one, _ = generate_pair(model64, (pairs[2].pre.code, pairs[2].post.code), cfg, draw_rng(4, 2, 1, 0))
    assert np.array_equal(one.pre.code, a[5].pre.code)


def test_config_validation():
    for bad in ({"sigma": 0.0}, {"band": -1.0}, {"factor": 0}, {"retries": -1}):
        with pytest.raises(AugmentError):
            AugmentConfig(**bad)


def test_empty_source(model64):
    with pytest.raises(AugmentError):
        augment_dataset(model64, [])
