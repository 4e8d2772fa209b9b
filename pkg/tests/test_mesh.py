import numpy as np
import pytest

from orthopreview.mesh import (
    LANDMARK_MIRROR,
    N_LANDMARKS,
    LandmarkSet,
    Mesh,
    MeshError,
    ObjParseError,
    load_landmarks,
    load_obj,
    save_landmarks,
    save_obj,
)
from orthopreview.morphable import build_synthetic_model


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_obj(tmp_path):
    m = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.n_vertices == 3
    assert m.triangles.tolist() == [[0, 1, 2]]


def test_slashes_stripped(tmp_path):
    m = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 2/1/1 3/2/1 1/3/1\n"))
    assert m.triangles.tolist() == [[1, 2, 0]]


def test_colored_vertices(tmp_path):
    m = load_obj(write(tmp_path, "v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nf 1 2 3\n"))
    assert np.array_equal(m.colors, np.eye(3))
    out = tmp_path / "c.obj"
    save_obj(m, out)
    assert out.read_text().splitlines()[0].split()[0] == "v"
    assert len(out.read_text().splitlines()[0].split()) == 7


@pytest.mark.parametrize("text,line", [("v 0 0\n", 1), ("v 0 0 0\nf 1 2\n", 2), ("v 0 0 0\nv 1 1 1\nv 2 0 0\nf 1 2 x\n", 4)])
def test_parse_error_has_line_number(tmp_path, text, line):
    with pytest.raises(ObjParseError) as err:
        load_obj(write(tmp_path, text))
    assert err.value.lineno == line


def test_empty_obj(tmp_path):
    with pytest.raises(MeshError):
        load_obj(write(tmp_path, "# nothing\n"))


def test_single_vertex_no_faces(tmp_path):
    p = tmp_path / "one.obj"
    save_obj(Mesh([[1.0, 2.0, 3.0]]), p)
    lines = p.read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 1
    assert not any(l.startswith("f ") for l in lines)


def test_round_trip_large_head(tmp_path):
    model = build_synthetic_model(1, 8, 36)
    assert model.n_vertices >= 5000
    mesh = model.template_mesh()
    p = tmp_path / "head.obj"
    save_obj(mesh, p)
    back = load_obj(p)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    assert np.array_equal(back.triangles, mesh.triangles)
    # save/load/save is byte-identical
    p2 = tmp_path / "head2.obj"
    save_obj(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_mesh_invariants():
    with pytest.raises(MeshError):
        Mesh([[0, 0, 0], [1, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    with pytest.raises(MeshError):
        Mesh([[0, 0, np.nan]])


def test_landmark_round_trip(tmp_path, rng):
    lm = LandmarkSet(rng.normal(size=(N_LANDMARKS, 3)))
    p = tmp_path / "lm.txt"
    save_landmarks(lm, p)
    assert len(p.read_text().splitlines()) == N_LANDMARKS
    assert np.array_equal(load_landmarks(p).points, lm.points)


def test_landmark_count_enforced():
    with pytest.raises(MeshError):
        LandmarkSet(np.zeros((67, 3)))


def test_named_accessors(rng):
    pts = rng.normal(size=(N_LANDMARKS, 3))
    lm = LandmarkSet(pts)
    assert np.array_equal(lm.subnasale, pts[33])
    assert np.array_equal(lm.pogonion, pts[8])
    assert np.array_equal(lm.upper_lip, pts[51])
    assert np.array_equal(lm.lower_lip, pts[57])


def test_landmark_mirror_is_involution():
    m = np.asarray(LANDMARK_MIRROR)
    assert np.array_equal(m[m], np.arange(N_LANDMARKS))
