import numpy as np
import pytest

from hdsa.optctl import SolveCounters
from hdsa.pde import (
    MODEL_NAMES,
    Linearization,
    ModelPairDiscrepancy,
    NonConvergence,
    apply_solution_jacobian,
    apply_solution_jacobian_transpose,
    jacobian_control,
    jacobian_state,
    make_model,
    residual,
    solve_forward,
)

SMALL = {"diffusion1d": 10, "advdiff1d": 10, "cdr2d": 6}


def models():
    return [make_model(name, SMALL[name]) for name in MODEL_NAMES]


def true_source(x):
    return np.exp(-50 * (x[:, 0] - 0.5) ** 2)


def test_residual_zero_at_origin():
    for model in models():
        assert np.abs(residual(model, np.zeros(model.m), np.zeros(model.n))).max() == 0.0


def test_dimension_checks():
    model = make_model("diffusion1d", 4)
    with pytest.raises(ValueError):
        residual(model, np.zeros(3), np.zeros(model.n))
    with pytest.raises(ValueError):
        residual(model, np.zeros(model.m), np.zeros(model.n + 1))
    with pytest.raises(ValueError):
        make_model("heat3d", 4)


def test_control_layout():
    d = make_model("diffusion1d", 3)
    assert (d.m, d.n) == (4, 3)
    assert d.control_nodes.tolist() == [1, 2, 3]
    c = make_model("cdr2d", 4)
    assert c.n == c.m == 25
    assert make_model("cdr2d", 4, controls="free").n == 20


def test_advdiff_true_source_residual():
    model = make_model("advdiff1d", 200)
    z = model.interpolate_control(true_source)
    res = solve_forward(model, z)
    assert np.linalg.norm(residual(model, res.state, z)) <= 1e-10
    assert res.iterations == 1


def test_linear_models_jacobian_independent_of_state(rng):
    for name in ("diffusion1d", "advdiff1d"):
        model = make_model(name, 8)
        J1 = jacobian_state(model, rng.standard_normal(model.m)).toarray()
        J2 = jacobian_state(model, rng.standard_normal(model.m)).toarray()
        np.testing.assert_array_equal(J1, J2)


def test_dirichlet_rows_are_identity(rng):
    for model in models():
        J = jacobian_state(model, rng.standard_normal(model.m)).toarray()
        for i in model.dirichlet:
            row = np.zeros(model.m)
            row[i] = 1.0
            np.testing.assert_array_equal(J[i], row)


def test_cdr_state_jacobian_central_difference(rng):
    model = make_model("cdr2d", 6)
    u = 0.5 * rng.standard_normal(model.m)
    z = rng.standard_normal(model.n)
    v = rng.standard_normal(model.m)
    eps = 1e-5
    fd = (residual(model, u + eps * v, z) - residual(model, u - eps * v, z)) / (2 * eps)
    Jv = jacobian_state(model, u).matrix @ v
    assert np.linalg.norm(fd - Jv) / np.linalg.norm(Jv) < 1e-5


def test_control_jacobian_is_minus_mass_on_free_rows(rng):
    for model in models():
        Jz = jacobian_control(model).toarray()
        expected = -model.control_mass.toarray()
        expected[model.dirichlet] = 0.0
        np.testing.assert_array_equal(Jz, expected)
        # and it is the true derivative of the residual in z
        z, dz = rng.standard_normal(model.n), rng.standard_normal(model.n)
        u = np.zeros(model.m)
        np.testing.assert_allclose(residual(model, u, z + dz) - residual(model, u, z), Jz @ dz, atol=1e-13)


def test_forward_trivial_and_linear(rng):
    for name in ("diffusion1d", "advdiff1d"):
        model = make_model(name, 12)
        res0 = solve_forward(model, np.zeros(model.n))
        assert res0.iterations == 1 and np.all(res0.state == 0)
        res = solve_forward(model, rng.standard_normal(model.n))
        assert res.iterations == 1


def test_forward_cdr_converges_and_dirichlet_exact():
    model = make_model("cdr2d", 16)
    z = model.interpolate_control(lambda x: np.sin(np.pi * x[:, 0]) * x[:, 1])
    res = solve_forward(model, z)
    r0 = np.linalg.norm(residual(model, np.zeros(model.m), z))
    assert res.residual_norm <= 1e-10 * max(1.0, r0)
    assert res.iterations <= 50
    assert np.all(res.state[model.dirichlet] == 0.0)


def test_forward_nonconvergence_reports_history():
    model = make_model("cdr2d", 4)
    with pytest.raises(NonConvergence) as info:
        solve_forward(model, 50.0 * np.ones(model.n), maxiter=2)
    assert len(info.value.history) >= 2
    with pytest.raises(ValueError):
        solve_forward(model, np.full(model.n, np.nan))


def test_superposition_linear_models(rng):
    for name in ("diffusion1d", "advdiff1d"):
        model = make_model(name, 15)
        S = lambda z: solve_forward(model, z).state
        z1, z2 = rng.standard_normal(model.n), rng.standard_normal(model.n)
        np.testing.assert_allclose(S(z1 + z2) - S(np.zeros(model.n)), S(z1) + S(z2) - 2 * S(np.zeros(model.n)), atol=1e-10)


def test_solution_jacobian_contracts(rng):
    for model in models():
        z = 0.3 * rng.standard_normal(model.n)
        u = solve_forward(model, z).state
        c = SolveCounters()
        lin = Linearization(model, u, z, c)
        assert np.all(lin.solution_jacobian(np.zeros(model.n)) == 0)
        v, w = rng.standard_normal(model.n), rng.standard_normal(model.m)
        lhs = w @ lin.solution_jacobian(v)
        rhs = lin.solution_jacobian_transpose(w) @ v
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
        assert (c["Jc_solve"], c["Jc_solve_T"], c["dS"], c["dS_T"]) == (2, 1, 2, 1)


def test_solution_jacobian_dense_oracle(rng):
    model = make_model("diffusion1d", 9)
    u = np.zeros(model.m)
    z = np.zeros(model.n)
    Ju = jacobian_state(model, u).toarray()
    Jz = jacobian_control(model).toarray()
    S = -np.linalg.solve(Ju, Jz)
    v = rng.standard_normal(model.n)
    w = rng.standard_normal(model.m)
    np.testing.assert_allclose(apply_solution_jacobian(model, u, z, v), S @ v, atol=1e-12)
    np.testing.assert_allclose(apply_solution_jacobian_transpose(model, u, z, w), S.T @ w, atol=1e-12)


def test_solution_jacobian_matches_forward_differences(rng):
    model = make_model("cdr2d", 6)
    z = 0.5 * rng.standard_normal(model.n)
    v = rng.standard_normal(model.n)
    u = solve_forward(model, z).state
    eps = 1e-5
    fd = (solve_forward(model, z + eps * v).state - solve_forward(model, z - eps * v).state) / (2 * eps)
    Sv = apply_solution_jacobian(model, u, z, v)
    assert np.linalg.norm(fd - Sv) / np.linalg.norm(Sv) < 1e-6


def test_model_pair_discrepancy(rng):
    hi, lo = make_model("advdiff1d", 20), make_model("diffusion1d", 20)
    d = ModelPairDiscrepancy(hi, lo)
    z = rng.standard_normal(lo.n)
    np.testing.assert_allclose(d.value(z), solve_forward(hi, z).state - solve_forward(lo, z).state, atol=1e-12)
    w = rng.standard_normal(lo.m)
    v = rng.standard_normal(lo.n)
    assert np.isclose(w @ d.jac(z, v), d.jac_transpose(z, w) @ v, rtol=1e-12)
    assert np.all(ModelPairDiscrepancy(lo, lo).value(z) == 0)
    np.testing.assert_allclose(d.scaled(0.5).value(z), 0.5 * d.value(z))
    with pytest.raises(ValueError):
        ModelPairDiscrepancy(make_model("cdr2d", 4), make_model("cdr2d", 4))
