import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from orthopreview.geometry import (
    GeometryError,
    Plane,
    RegionMask,
    build_symmetry_pairing,
    fit_midsagittal_plane,
    point_line_distance,
    point_plane_distance,
    rigid_align,
    triangle_normals,
)
from orthopreview.mesh import BROW_MID_LEFT, BROW_MID_RIGHT, INNER_EYE_LEFT, INNER_EYE_RIGHT, LandmarkSet
from orthopreview.morphable import decode, landmark_positions, region_mask, symmetric_code

coords = st.floats(-100, 100, allow_nan=False)
vec3 = st.tuples(coords, coords, coords).map(np.array)


def landmarks_with(brow, eye, rng):
    pts = rng.normal(size=(68, 3)) * 30
    for i, j in ((BROW_MID_RIGHT, BROW_MID_LEFT), (INNER_EYE_RIGHT, INNER_EYE_LEFT)):
        mid = brow if i == BROW_MID_RIGHT else eye
        off = rng.normal(size=3)
        pts[i], pts[j] = mid - off, mid + off
    return LandmarkSet(pts)


# ---------------------------------------------------------------- rigid_align


def test_rigid_align_identity(model16):
    lm = model16.template[model16.landmark_indices]
    xf = rigid_align(lm, lm)
    assert np.allclose(xf.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(xf.translation, 0, atol=1e-9)


def test_rigid_align_recovers_transform(model16):
    src = model16.template[model16.landmark_indices]
    r = Rotation.from_euler("y", 30, degrees=True).as_matrix()
    dst = src @ r.T + [5.0, 0.0, 0.0]
    xf = rigid_align(src, dst)
    assert np.abs(xf.rotation - r).max() < 1e-6
    assert np.abs(xf.translation - [5, 0, 0]).max() < 1e-6


def test_rigid_align_reflection_gives_proper_rotation(model16):
    src = model16.template[model16.landmark_indices] + [3.0, 0, 0]
    dst = src * [-1, 1, 1]
    xf = rigid_align(src, dst)
    assert np.isclose(np.linalg.det(xf.rotation), 1.0)
    assert np.linalg.norm(xf.apply(src) - dst) > 0


def test_rigid_align_collinear_rejected():
    src = np.outer(np.arange(68.0), [1, 2, 3])
    with pytest.raises(GeometryError):
        rigid_align(src, src)


def test_transform_inverse(rng):
    xf = rigid_align(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)))
    p = rng.normal(size=(5, 3))
    assert np.allclose(xf.inverse().apply(xf.apply(p)), p, atol=1e-12)


# ---------------------------------------------------------------- planes


def test_midsagittal_symmetric_face(rng):
    plane = fit_midsagittal_plane(landmarks_with(np.array([0, 10.0, 0]), np.array([0, 0, 5.0]), rng))
    assert np.allclose(plane.normal, [1, 0, 0])
    assert abs(plane.offset) < 1e-12


def test_midsagittal_contains_midpoints(rng):
    m1, m2 = np.array([1.0, 10, 0]), np.array([-1.0, 0, 0])
    plane = fit_midsagittal_plane(landmarks_with(m1, m2, rng))
    u = (m2 - m1) / np.linalg.norm(m2 - m1)
    expect = np.array([1.0, 0, 0]) - u[0] * u
    assert np.allclose(plane.normal, expect / np.linalg.norm(expect), atol=1e-12)
    assert abs(plane.normal @ m1 - plane.offset) < 1e-9
    assert abs(plane.normal @ m2 - plane.offset) < 1e-9
    assert plane.normal[0] > 0


def test_midsagittal_coincident_midpoints(rng):
    m = np.array([2.0, 3.0, 4.0])
    plane = fit_midsagittal_plane(landmarks_with(m, m, rng))
    assert np.array_equal(plane.normal, [1.0, 0, 0])
    assert plane.offset == pytest.approx(2.0)


def test_midsagittal_degenerate(rng):
    with pytest.raises(GeometryError):
        fit_midsagittal_plane(landmarks_with(np.zeros(3), np.array([5.0, 0, 0]), rng))


def test_midsagittal_symmetric_model_face(model64, rng):
    code = symmetric_code(rng.normal(size=64))
    plane = fit_midsagittal_plane(landmark_positions(model64, code))
    assert np.abs(plane.normal - [1, 0, 0]).max() < 1e-6
    assert abs(plane.offset) < 1e-6


@settings(max_examples=50, deadline=None)
@given(vec3, vec3, st.floats(-50, 50), st.floats(-50, 50))
def test_midsagittal_invariant_to_in_plane_translation(m1, m2, s, t):
    d = m2 - m1
    if np.linalg.norm(d) < 1e-3 or np.linalg.norm(d[1:]) < 1e-3 * max(1.0, np.linalg.norm(d)):
        return
    rng = np.random.default_rng(0)
    p = fit_midsagittal_plane(landmarks_with(m1, m2, rng))
    # two in-plane directions
    a = np.cross(p.normal, [0, 1, 0] if abs(p.normal[1]) < 0.9 else [0, 0, 1])
    a /= np.linalg.norm(a)
    b = np.cross(p.normal, a)
    shift = s * a + t * b
    q = fit_midsagittal_plane(landmarks_with(m1 + shift, m2 + shift, rng))
    assert np.allclose(p.normal, q.normal, atol=1e-9)
    assert abs(p.offset - q.offset) < 1e-9 * (1 + abs(p.offset))


def test_midsagittal_permutation_of_equivalent_inputs(rng):
    lm = landmarks_with(np.array([1.0, 20, 3]), np.array([-0.5, 5, 8]), rng)
    pts = lm.points.copy()
    pts[[BROW_MID_RIGHT, BROW_MID_LEFT]] = pts[[BROW_MID_LEFT, BROW_MID_RIGHT]]
    pts[[INNER_EYE_RIGHT, INNER_EYE_LEFT]] = pts[[INNER_EYE_LEFT, INNER_EYE_RIGHT]]
    a, b = fit_midsagittal_plane(lm), fit_midsagittal_plane(LandmarkSet(pts))
    assert np.allclose(a.normal, b.normal, atol=1e-12) and abs(a.offset - b.offset) < 1e-9


def test_plane_normal_must_be_unit():
    with pytest.raises(GeometryError):
        Plane([2.0, 0, 0], 0.0)


def test_point_plane_distance():
    plane = Plane([1.0, 0, 0], 0.0)
    assert point_plane_distance([3, 7, -2], plane) == 3
    assert point_plane_distance([0, 7, -2], plane) == 0


def test_point_plane_distance_projection_oracle(rng):
    for _ in range(20):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = Plane(n, rng.normal() * 10)
        p = rng.normal(size=3) * 20
        foot = p - (n @ p - plane.offset) * n  # projection onto the plane
        assert abs(point_plane_distance(p, plane) - np.linalg.norm(p - foot)) < 1e-12


def test_point_line_distance():
    assert point_line_distance([4, 5, 0], [0, 0, 0], [0, 10, 0]) == 4
    assert point_line_distance([0, 5, 0], [0, 0, 0], [0, 10, 0]) == 0
    with pytest.raises(GeometryError):
        point_line_distance([1, 1, 1], [0, 0, 0], [0, 0, 1e-12])


def test_point_line_distance_oracle(rng):
    for _ in range(20):
        p, a, b = rng.normal(size=(3, 3)) * 10
        # closest point parameter along the line
        t = (p - a) @ (b - a) / ((b - a) @ (b - a))
        ref = np.linalg.norm(p - (a + t * (b - a)))
        assert abs(point_line_distance(p, a, b) - ref) < 1e-12


# ---------------------------------------------------------------- normals and regions


def test_triangle_normals_winding():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    assert np.allclose(triangle_normals(v, np.array([[0, 1, 2]])), [[0, 0, 1]])
    assert np.allclose(triangle_normals(v, np.array([[0, 2, 1]])), [[0, 0, -1]])


def test_degenerate_triangles_reported():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0], [0, 1, 0]])
    n, bad = triangle_normals(v, np.array([[0, 1, 2], [0, 1, 3]]), return_degenerate=True)
    assert bad.tolist() == [0]
    assert np.array_equal(n[0], np.zeros(3))


def test_head_normals_point_outward(model16):
    # the template is the front half of a head, a height field over (x, y):
    # outward is anterior
    n = triangle_normals(model16.template_mesh())
    assert np.all(n[:, 2] > 0)


def test_region_mask_sorted_and_triangles(model16):
    mask = RegionMask.from_vertices([5, 3, 3, 1], model16.triangles, model16.n_vertices)
    assert mask.indices.tolist() == [1, 3, 5]
    face = region_mask(model16, "face")
    assert np.all(np.isin(model16.triangles[face.triangles], face.indices))


def test_pairing_single_midline_vertex(model16):
    mid = int(np.flatnonzero(model16.mirror == np.arange(model16.n_vertices))[0])
    pairing = build_symmetry_pairing(model16.mirror, RegionMask.from_vertices([mid], model16.triangles))
    assert len(pairing.pairs) == 0 and pairing.midline.tolist() == [mid]


def test_chin_pairing_counts(model16):
    chin = region_mask(model16, "chin")
    pairing = build_symmetry_pairing(model16, chin)
    assert 2 * len(pairing.pairs) + len(pairing.midline) == len(chin)
    used = np.concatenate([pairing.pairs.ravel(), pairing.midline])
    assert len(np.unique(used)) == len(used)


def test_pairing_reflection_oracle(model64, rng):
    v = decode(model64, symmetric_code(rng.normal(size=64))).vertices
    pairs = build_symmetry_pairing(model64, region_mask(model64, "chin")).pairs
    assert np.abs(v[pairs[:, 0]] * [-1, 1, 1] - v[pairs[:, 1]]).max() < 1e-9


def test_pairing_not_mirror_closed(model16):
    right = np.flatnonzero(model16.template[:, 0] < -1.0)[:3]
    with pytest.raises(GeometryError, match="offending"):
        build_symmetry_pairing(model16, RegionMask.from_vertices(right, model16.triangles))
