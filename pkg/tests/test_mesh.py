import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bumpsplit.errors import AmplitudeTooLargeError, InvalidParameterError
from bumpsplit.geometry import BumpSpec, DeformationField, PolygonalDomain, apply_bump
from bumpsplit.mesh import mesh_from_text, mesh_to_text, move_mesh, refine, triangulate


def test_coarse_square(square):
    m = triangulate(square, 0.5)
    assert m.n_triangles >= 8
    assert m.areas().sum() == pytest.approx(1.0, abs=1e-12)
    m.check_conforming()


def test_quality_postconditions(square):
    m = triangulate(square, 0.05)
    assert m.h <= 0.05 * (1 + 1e-12)
    assert m.angles().min() >= 20.0 - 1e-9
    assert np.all(m.areas() > 0)


def test_bump_vertices_are_nodes(square):
    d = apply_bump(square, BumpSpec(0, 0.5, 0.1, 1.0, resolution=33))
    m = triangulate(d, 0.05)
    for v in d.vertices:
        assert np.min(np.linalg.norm(m.nodes - v, axis=1)) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.08, 0.3))
def test_area_preserved(w, h_, h):
    d = PolygonalDomain.rectangle(w, h_)
    assert triangulate(d, h).areas().sum() == pytest.approx(w * h_, rel=1e-12)


def test_refine(square):
    m = triangulate(square, 0.5)
    r = refine(m)
    assert r.n_triangles == 4 * m.n_triangles
    assert r.areas().sum() == pytest.approx(1.0, abs=1e-12)
    rr = refine(r)
    assert rr.h == pytest.approx(m.h / 4, rel=1e-12)
    # boundary tagging follows the split
    nodes, s = rr.edge_nodes(0)
    assert s[0] == 0.0 and s[-1] == pytest.approx(1.0)


def test_move_mesh_identity_and_support(square_mesh, square):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1))
    assert move_mesh(square_mesh, fld, 0.0) is square_mesh
    moved = move_mesh(square_mesh, fld, 0.01)
    shifted = np.linalg.norm(moved.nodes - square_mesh.nodes, axis=1) > 0
    dist = np.linalg.norm(square_mesh.nodes[shifted] - [0.5, 0.0], axis=1)
    assert shifted.any()
    assert np.all(dist <= 0.1 + fld.cutoff_width)


def test_move_mesh_guard(square_mesh, square):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1))
    with pytest.raises(AmplitudeTooLargeError) as exc:
        move_mesh(square_mesh, fld, 1e4)
    safe = exc.value.max_safe_t
    assert 0 < safe < 1e4
    move_mesh(square_mesh, fld, 0.99 * safe)


def test_move_mesh_rejects_negative_t(square_mesh, square):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1))
    with pytest.raises(InvalidParameterError):
        move_mesh(square_mesh, fld, -1.0)


def test_text_round_trip(square):
    m = triangulate(square, 0.25)
    back = mesh_from_text(mesh_to_text(m))
    np.testing.assert_array_equal(back.nodes, m.nodes)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_array_equal(back.boundary_tags, m.boundary_tags)


def test_triangulation_deterministic(square):
    a, b = triangulate(square, 0.05), triangulate(square, 0.05)
    np.testing.assert_array_equal(a.nodes, b.nodes)
    np.testing.assert_array_equal(a.triangles, b.triangles)
