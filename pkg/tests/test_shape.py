import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bumpsplit.eigen import solve_lowest
from bumpsplit.errors import BumpPlacementError, DegenerateDiscriminantError
from bumpsplit.fem import assemble
from bumpsplit.geometry import BumpSpec, DeformationField, bump_profile
from bumpsplit.mesh import triangulate
from bumpsplit.shape import (
    BoundaryTrace,
    boundary_trace,
    c_constant,
    discriminant,
    discriminant_matrix,
    hadamard_matrix,
    select_bump_center,
    separation_profile,
)

from conftest import PI2


@pytest.mark.parametrize(
    "bc, sigma, expected",
    [("dirichlet", 0.0, 0.0), ("neumann", 0.0, 49.3), ("robin", 2.0, 57.3)],
)
def test_c_constant(bc, sigma, expected):
    assert c_constant(bc, 49.3, sigma) == pytest.approx(expected, rel=1e-14)


def test_ground_state_trace(square_mesh, square_system, square_spectrum):
    tr = boundary_trace(square_mesh, square_system, square_spectrum.pair(1), 0)
    assert np.all(tr.u == 0)
    exact = 4 * PI2 * np.sin(math.pi * tr.s) ** 2
    interior = (tr.s > 0.1) & (tr.s < 0.9)
    err = np.abs(tr.grad_sq - exact)[interior].max() / exact.max()
    assert err < 0.05
    np.testing.assert_array_equal(discriminant(tr, 0.0), tr.grad_sq)


def test_neumann_constant_mode(square):
    m = triangulate(square, 0.1)
    s = assemble(m, "neumann")
    tr = boundary_trace(m, s, solve_lowest(s, 1).pair(1), 0)
    np.testing.assert_allclose(tr.u, tr.u[0], rtol=1e-8)
    assert np.max(np.abs(discriminant(tr, 0.0))) < 1e-10


def test_ground_state_rate(square, square_mesh, square_system, square_spectrum):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1))
    rep = hadamard_matrix(square_mesh, square_system, [square_spectrum.pair(1)], fld)
    q = np.linspace(0.4, 0.6, 20001)
    oracle = -np.trapezoid(4 * PI2 * np.sin(math.pi * q) ** 2 * bump_profile(q - 0.5, 0.1), q)
    # outward bumps lower Dirichlet eigenvalues
    assert rep.predicted_rates[0] < 0
    assert rep.predicted_rates[0] == pytest.approx(oracle, rel=1e-2)
    assert rep.discrete_rates[0] == pytest.approx(oracle, rel=1e-2)
    json.loads(rep.to_json())


def test_zero_field_gives_zero_matrix(square, square_mesh, square_system, square_spectrum):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1), gain=0.0)
    rep = hadamard_matrix(square_mesh, square_system, [square_spectrum.pair(i) for i in (2, 3)], fld)
    assert np.all(rep.derivative_matrix == 0)


def test_pair_rates_differ_and_match_oracle(square, square_mesh, square_system, square_spectrum):
    fld = DeformationField.from_domain(square, BumpSpec(0, 0.5, 0.1))
    rep = hadamard_matrix(square_mesh, square_system, [square_spectrum.pair(i) for i in (2, 3)], fld)
    q = np.linspace(0.4, 0.6, 20001)
    w = bump_profile(q - 0.5, 0.1)
    v = np.stack([-4 * math.pi * np.sin(math.pi * q), -2 * math.pi * np.sin(2 * math.pi * q)])
    oracle = np.linalg.eigvalsh(-np.trapezoid(v[:, None] * v[None, :] * w, q, axis=2))
    assert rep.predicted_rates[1] - rep.predicted_rates[0] > 0.05
    assert np.max(np.abs(rep.predicted_rates - oracle)) <= 0.02 * np.max(np.abs(oracle))


def _rotate(traces, theta):
    c, s = math.cos(theta), math.sin(theta)
    Q = np.array([[c, -s], [s, c]])

    def mix(attr):
        X = np.stack([getattr(t, attr) for t in traces], axis=1) @ Q
        return [X[:, j] for j in range(2)]

    u, ds, dn = mix("u"), mix("du_ds"), mix("du_dnu")
    return [
        BoundaryTrace(t.edge_id, t.s, u[j], ds[j], dn[j], ds[j] ** 2 + dn[j] ** 2, t.lam)
        for j, t in enumerate(traces)
    ]


@pytest.fixture(scope="module")
def pair_traces(square_mesh, square_system, square_spectrum):
    return [boundary_trace(square_mesh, square_system, square_spectrum.pair(i), 0) for i in (2, 3)]


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi))
def test_selection_basis_invariant(pair_traces, theta):
    base = select_bump_center(pair_traces, 0.0, 0.06, (0.2, 0.8))
    rot = select_bump_center(_rotate(pair_traces, theta), 0.0, 0.06, (0.2, 0.8))
    assert rot[0] == base[0]
    assert rot[1] == pytest.approx(base[1], rel=1e-9)


def test_separation_peaks_at_midpoint(pair_traces):
    sep = separation_profile(pair_traces, 0.0)
    s = pair_traces[0].s
    assert s[np.argmax(sep)] == pytest.approx(0.5, abs=0.02)
    assert sep.max() == pytest.approx(16 * PI2, rel=0.05)


def test_discriminant_matrix_diagonal_is_g(pair_traces):
    G = discriminant_matrix(pair_traces, 0.0)
    for i, t in enumerate(pair_traces):
        np.testing.assert_allclose(G[:, i, i], discriminant(t, 0.0), rtol=1e-13)


def test_identical_traces_rejected(pair_traces):
    with pytest.raises(DegenerateDiscriminantError):
        select_bump_center([pair_traces[0], pair_traces[0]], 0.0, 0.06)


def test_single_sample_traces():
    one = [BoundaryTrace(0, np.array([0.5]), np.array([a]), np.zeros(1), np.array([b]), np.array([b * b]))
           for a, b in ((1.0, 2.0), (0.0, 1.0))]
    s0, score = select_bump_center(one, 0.0, 0.01)
    assert s0 == 0.5 and score > 0


def test_no_admissible_centre(pair_traces):
    with pytest.raises(BumpPlacementError):
        select_bump_center(pair_traces, 0.0, 0.6)


def test_bump_touching_vertex_rejected(square):
    with pytest.raises(BumpPlacementError):
        DeformationField.from_domain(square, BumpSpec(0, 0.95, 0.1))
