import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import eigvalsh

from hdsa.fem import (
    BoundaryProjector,
    SparseOperator,
    assemble_advection,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    boundary_projector,
    evaluate_at_quadrature,
    interval_mesh,
    quadrature,
    unit_square_mesh,
)
from hdsa.pde import cdr_velocity


def hat_integral_oracle(num_cells, f, g):
    """int f(phi, phi') g(phi, phi') for 1D hats, 12-point Gauss-Legendre per cell."""
    t, w = np.polynomial.legendre.leggauss(12)
    nodes = np.linspace(0, 1, num_cells + 1)
    h = 1.0 / num_cells
    out = np.zeros((num_cells + 1, num_cells + 1))
    for e in range(num_cells):
        x = nodes[e] + h * (t + 1) / 2
        d = x[None, :] - nodes[:, None]
        hats = np.clip(1 - np.abs(d) / h, 0, None)
        # x lies strictly inside cell e, so the derivative is unambiguous
        dhats = np.where(np.abs(d) < h, -np.sign(d) / h, 0.0)
        A, B = f(hats, dhats), g(hats, dhats)
        out += (A[:, None, :] * B[None, :, :]) @ (w * h / 2)
    return out


def test_mass_1d_two_elements():
    M = assemble_mass(interval_mesh(2)).toarray()
    expected = np.array([[1 / 6, 1 / 12, 0], [1 / 12, 1 / 3, 1 / 12], [0, 1 / 12, 1 / 6]])
    np.testing.assert_allclose(M, expected, atol=1e-15)


def test_mass_matches_numerical_integration():
    M = assemble_mass(interval_mesh(4)).toarray()
    ref = hat_integral_oracle(4, lambda p, dp: p, lambda p, dp: p)
    np.testing.assert_allclose(M, ref, atol=1e-13)


@pytest.mark.parametrize("mesh", [interval_mesh(7), unit_square_mesh(5)], ids=["1d", "2d"])
def test_mass_partition_of_unity(mesh):
    M = assemble_mass(mesh).matrix
    one = np.ones(mesh.num_nodes)
    assert np.isclose(one @ M @ one, 1.0, atol=1e-14)
    # row sums are int phi_i
    np.testing.assert_allclose(M @ one, assemble_load(mesh, np.ones(quadrature(mesh)[1].shape)), atol=1e-15)


def test_mass_2d_spd():
    M = assemble_mass(unit_square_mesh(10)).toarray()
    assert np.abs(M - M.T).max() == 0.0
    assert eigvalsh(M).min() > 0


def test_stiffness_1d_two_elements():
    K = assemble_stiffness(interval_mesh(2), 1.0).toarray()
    np.testing.assert_allclose(K, [[2, -2, 0], [-2, 4, -2], [0, -2, 2]], atol=1e-14)


def test_stiffness_matches_numerical_integration():
    K = assemble_stiffness(interval_mesh(3)).toarray()
    ref = hat_integral_oracle(3, lambda p, dp: dp, lambda p, dp: dp)
    np.testing.assert_allclose(K, ref, atol=1e-13)


@pytest.mark.parametrize("mesh", [interval_mesh(6), unit_square_mesh(4)], ids=["1d", "2d"])
def test_stiffness_kills_constants(mesh):
    K = assemble_stiffness(mesh).matrix
    assert np.abs(K @ np.ones(mesh.num_nodes)).max() < 1e-12


def test_stiffness_zero_coefficient_and_negative():
    mesh = unit_square_mesh(3)
    assert assemble_stiffness(mesh, 0.0).matrix.count_nonzero() == 0
    with pytest.raises(ValueError):
        assemble_stiffness(mesh, -1.0)


def test_stiffness_2d_against_five_point_energy():
    # for u = x^2 + y, int |grad u|^2 = int 4x^2 + 1 = 7/3; P1 interpolant converges at O(h^2)
    errs = []
    for n in (8, 16):
        mesh = unit_square_mesh(n)
        u = mesh.coords[:, 0] ** 2 + mesh.coords[:, 1]
        errs.append(abs(u @ assemble_stiffness(mesh).matrix @ u - 7 / 3))
    assert errs[1] < errs[0] / 3


def test_advection_zero_velocity():
    assert assemble_advection(unit_square_mesh(3), (0.0, 0.0)).matrix.count_nonzero() == 0


def test_advection_1d_unit_velocity():
    C = assemble_advection(interval_mesh(2), 1.0).toarray()
    np.testing.assert_allclose(C, [[-0.5, 0.5, 0], [-0.5, 0, 0.5], [0, -0.5, 0.5]], atol=1e-14)


def test_advection_matches_numerical_integration():
    C = assemble_advection(interval_mesh(3), 1.0).toarray()
    ref = hat_integral_oracle(3, lambda p, dp: p, lambda p, dp: dp)
    np.testing.assert_allclose(C, ref, atol=1e-13)


def test_advection_skew_plus_boundary():
    # C + C^T = int div(v phi_i phi_j)... for constant v: boundary flux only
    mesh = unit_square_mesh(6)
    C = assemble_advection(mesh, (1.0, 0.0)).matrix
    S = (C + C.T).toarray()
    interior = np.flatnonzero(mesh.tags == "")
    assert np.abs(S[np.ix_(interior, interior)]).max() < 1e-14


def test_advection_reference_velocity_100():
    mesh = unit_square_mesh(100)
    C = assemble_advection(mesh, cdr_velocity).matrix
    assert C.shape == (101 * 101, 101 * 101)
    assert np.all(np.isfinite(C.data))
    # div v = -2 pi sin(2 pi x1) - 4 pi cos sin(2 pi x2)... integrates to zero on the square;
    # 1^T C 1 = int v . grad 1 = 0
    one = np.ones(mesh.num_nodes)
    assert abs(one @ C @ one) < 1e-12


def test_boundary_projector():
    n = 6
    mesh = unit_square_mesh(n)
    P = boundary_projector(mesh, "bottom")
    assert P.indices.size == n + 1
    assert np.all(mesh.coords[P.indices, 1] == 0.0)
    assert boundary_projector(interval_mesh(4), "left").indices.tolist() == [0]
    x = np.random.default_rng(0).standard_normal(mesh.num_nodes)
    PtPx = P.apply_transpose(P.apply(x))
    np.testing.assert_array_equal(PtPx[P.indices], x[P.indices])
    assert np.all(np.delete(PtPx, P.indices) == 0)
    np.testing.assert_array_equal((P.matrix().T @ P.matrix()) @ x, PtPx)


def test_boundary_projector_errors():
    with pytest.raises(KeyError):
        boundary_projector(interval_mesh(3), "top")
    with pytest.raises(ValueError):
        BoundaryProjector(np.array([0, 0]), 3)


def test_quadrature_exact_for_cubic_products():
    # int_0^1 x^5 dx with x interpolated exactly only at quadrature level: use u = x (P1 exact)
    mesh = interval_mesh(5)
    _, w, _ = quadrature(mesh)
    uq = evaluate_at_quadrature(mesh, mesh.coords[:, 0])
    assert np.isclose((w * uq ** 5).sum(), 1 / 6, atol=1e-15)
    mesh2 = unit_square_mesh(4)
    _, w2, _ = quadrature(mesh2)
    xq = evaluate_at_quadrature(mesh2, mesh2.coords[:, 0])
    yq = evaluate_at_quadrature(mesh2, mesh2.coords[:, 1])
    assert np.isclose((w2 * xq ** 3 * yq ** 2).sum(), 1 / 12, atol=1e-14)


def test_sparse_operator_contracts():
    A = SparseOperator(sp.csr_matrix([[2.0, 1.0], [0.0, 3.0]]), "A")
    with pytest.raises(RuntimeError):
        A.solve(np.ones(2))
    A.factorize()
    b = np.array([1.0, 2.0])
    np.testing.assert_allclose(A.matrix @ A.solve(b), b)
    np.testing.assert_allclose(A.matrix.T @ A.solve_transpose(b), b)
    A.apply(b)
    A.apply_transpose(b)
    assert (A.n_apply, A.n_apply_transpose, A.n_solve, A.n_solve_transpose) == (1, 1, 1, 1)
    with pytest.raises(ValueError):
        A.apply(np.ones(3))
    with pytest.raises(np.linalg.LinAlgError):
        SparseOperator(sp.csr_matrix((2, 2)), "zero").factorize()
