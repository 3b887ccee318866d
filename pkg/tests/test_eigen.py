import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bumpsplit.eigen import Spectrum, EigenPair, calibrate_tau, detect_clusters, gap_quantity, solve_lowest
from bumpsplit.errors import InvalidParameterError
from bumpsplit.fem import assemble
from bumpsplit.geometry import PolygonalDomain
from bumpsplit.mesh import refine, triangulate

from conftest import PI2, square_levels

GOLDEN = (1 + math.sqrt(5)) / 2


def fake_spectrum(lams):
    return Spectrum(tuple(EigenPair(float(x), np.zeros(1), 0.0, i + 1) for i, x in enumerate(lams)))


def test_square_closed_form(square_spectrum):
    lam = square_spectrum.lambdas[:4]
    np.testing.assert_allclose(lam, PI2 * np.array([2, 5, 5, 8]), rtol=2e-3)


def test_residuals_and_orthonormality(square_spectrum, square_system):
    assert np.all(square_spectrum.residuals <= 1e-10)
    V = square_spectrum.vectors
    G = V.T @ (square_system.Mr @ V)
    assert np.max(np.abs(G - np.eye(len(G)))) <= 1e-10


def test_sign_convention(square_spectrum):
    for p in square_spectrum.pairs:
        i = np.argmax(np.abs(p.vector))
        assert p.vector[i] > 0


def test_neumann_zero_mode(square):
    s = solve_lowest(assemble(triangulate(square, 0.1), "neumann"), 3)
    assert abs(s.lambdas[0]) < 1e-8
    v = s.pair(1).vector
    np.testing.assert_allclose(v, v[0], rtol=1e-8)
    assert s.lambdas[1] == pytest.approx(PI2, rel=2e-2)


def test_golden_rectangle_simple():
    d = PolygonalDomain.rectangle(1.0, GOLDEN)
    s = detect_clusters(solve_lowest(assemble(triangulate(d, 0.03), "dirichlet"), 6), calibrate_tau(0.03))
    assert [c.m for c in s.clusters] == [1] * 6
    exact = sorted(PI2 * (a * a + b * b / GOLDEN**2) for a in range(1, 6) for b in range(1, 6))[:6]
    np.testing.assert_allclose(s.lambdas, exact, rtol=5e-3)


def test_clusters(square_spectrum):
    s = detect_clusters(square_spectrum, calibrate_tau(0.02))
    assert [(c.r, c.m) for c in s.clusters[:4]] == [(1, 1), (2, 2), (4, 1), (5, 2)]
    for c in s.clusters:
        assert c.width / max(square_spectrum.lambdas[c.r - 1], 1) <= s.tau
    assert [c.m for c in detect_clusters(square_spectrum, 0.0).clusters] == [1] * 12
    assert len(detect_clusters(square_spectrum, 1e9).clusters) == 1


def test_cluster_partition_covers_indices(square_spectrum):
    idx = [i for c in square_spectrum.clusters for i in c.indices]
    assert idx == list(range(1, square_spectrum.k + 1))


def test_gap_quantity(square_spectrum):
    assert gap_quantity(square_spectrum, 2, 2) == pytest.approx(3 * PI2, rel=3e-3)
    with pytest.raises(InvalidParameterError):
        gap_quantity(square_spectrum, 11, 2)


@given(st.floats(0.1, 10.0), st.integers(2, 5), st.integers(1, 3))
def test_gap_quantity_equal_gaps(g, r, m):
    s = fake_spectrum([1.0 + g * i for i in range(r + m + 2)])
    assert gap_quantity(s, r, m, tau=0.0) == pytest.approx(g, rel=1e-9)


@pytest.mark.slow
def test_convergence_order(square):
    m = triangulate(square, 0.04)
    exact = square_levels(4)
    e1 = np.abs(solve_lowest(assemble(m, "dirichlet"), 4).lambdas - exact)
    e2 = np.abs(solve_lowest(assemble(refine(m), "dirichlet"), 4).lambdas - exact)
    assert np.all((e1 / e2 >= 3.5) & (e1 / e2 <= 4.5))


def test_deterministic(square_system):
    a, b = solve_lowest(square_system, 6), solve_lowest(square_system, 6)
    np.testing.assert_array_equal(a.lambdas, b.lambdas)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_dense_and_sparse_paths_agree(square):
    small = assemble(triangulate(square, 0.15), "dirichlet")
    assert small.n_dofs <= 400
    big = assemble(refine(triangulate(square, 0.15)), "dirichlet")
    assert big.n_dofs > 400
    for sys_ in (small, big):
        np.testing.assert_allclose(solve_lowest(sys_, 3).lambdas, PI2 * np.array([2, 5, 5]), rtol=5e-2)


def test_robin_positive_sigma_has_negative_eigenvalue(square):
    # sigma u = du/dnu with sigma > 0 pushes the ground state below zero
    s = solve_lowest(assemble(triangulate(square, 0.05), "robin", sigma=1.0), 2)
    assert s.lambdas[0] < 0
    assert np.all(s.residuals <= 1e-8)


@pytest.mark.parametrize("k", [0, 10**6])
def test_bad_k(square_system, k):
    with pytest.raises(InvalidParameterError):
        solve_lowest(square_system, k)
