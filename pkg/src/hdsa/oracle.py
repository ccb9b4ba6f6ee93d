"""Dense brute-force references for the structured sensitivity code.

Nothing here is used on production paths. Every routine refuses to run
above a small, hard-coded size.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, subspace_angles

from .discrepancy import GaussianPrior, Kron2Mat, MthetaOperator, ThetaDiscrepancy, WeightingL, kron2_gram
from .optctl import solve_optimum
from .pde import second_order_matrix

log = logging.getLogger(__name__)

MAX_P = 36


def _check_p(m, n):
    p = m * (n + 1)
    if p > MAX_P:
        raise MemoryError(f"dense oracle limited to p <= {MAX_P}, got p = {p}")
    return p


@dataclass
class DenseInstance:
    mass_z: np.ndarray
    L: np.ndarray
    gamma: np.ndarray
    zbar: np.ndarray

    @property
    def m(self):
        return self.L.shape[0]

    @property
    def n(self):
        return self.mass_z.shape[0]

    def operator(self, counters=None):
        prior = GaussianPrior(self.zbar, np.linalg.inv(self.gamma))
        return MthetaOperator(WeightingL.from_matrix(self.L), self.mass_z, prior, counters)


def random_spd(rng, n, lo=0.5, hi=2.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * rng.uniform(lo, hi, n)) @ Q.T


def random_instance(rng, m=None, n=None):
    m = m or int(rng.integers(2, 7))
    n = n or int(rng.integers(2, 6))
    _check_p(m, n)
    return DenseInstance(random_spd(rng, n), random_spd(rng, m), random_spd(rng, n),
                         rng.standard_normal(n))


def dense_mtheta(inst):
    _check_p(inst.m, inst.n)
    L, Mz, zbar = inst.L, inst.mass_z, inst.zbar
    E = Mz @ (inst.gamma + np.outer(zbar, zbar)) @ Mz
    Mzb = Mz @ zbar
    return np.block([
        [L, np.kron(L, Mzb[None, :])],
        [np.kron(L, Mzb[:, None]), np.kron(L, E)],
    ])


def inverse_pieces(inst):
    """beta_hat, x, N, G, E computed literally from their definitions."""
    Mz, zbar = inst.mass_z, inst.zbar
    Gi = np.linalg.inv(inst.gamma)
    beta = zbar @ Gi @ zbar
    G = np.outer(Gi @ zbar, Gi @ zbar) / (1 + beta)
    x = np.linalg.solve(Mz, (Gi - G) @ zbar)
    Mzi = np.linalg.inv(Mz)
    N = Mzi @ Gi @ Mzi / (1 + beta)
    E = Mz @ (inst.gamma + np.outer(zbar, zbar)) @ Mz
    return beta, x, N, G, E, Gi


def appendix_identities(inst, x=None):
    """Residuals of the four identities behind the closed-form inverse.

    ``x`` overrides the literal one (used to check the structured operator).
    """
    beta, x_lit, N, G, E, Gi = inverse_pieces(inst)
    x = x_lit if x is None else x
    zbar, Mz = inst.zbar, inst.mass_z
    zz = np.outer(zbar, zbar)
    return {
        "identity_1": abs(zbar @ Mz @ x - beta / (1 + beta)),
        "identity_2": np.abs((Gi - G) @ zbar - Gi @ zbar / (1 + beta)).max(),
        "identity_3": np.abs(E @ x - Mz @ zbar).max(),
        "identity_4": np.abs(zz @ (Gi - G) - zz @ Gi / (1 + beta)).max(),
    }


def probe(apply, m, n):
    """Dense matrix of a structured operator on R^p by unit-vector probing."""
    p = _check_p(m, n)
    return np.column_stack([apply(Kron2Mat.basis(m, n, k)).densify()[:, 0] for k in range(p)])


# ---------------------------------------------------------------------------
# PDECO pieces

def dense_solution_jacobian(problem, u):
    model = problem.model
    from .pde import jacobian_control, jacobian_state

    Ju = jacobian_state(model, u).toarray()
    Jz = jacobian_control(model, u).toarray()
    return -np.linalg.solve(Ju, Jz)


def dense_hessian(problem, ev):
    """Reduced Hessian from dense matrices (no discrepancy)."""
    model, obj = problem.model, problem.objective
    S = dense_solution_jacobian(problem, ev.state)
    C = second_order_matrix(model, ev.state, ev.adjoint).toarray()
    return S.T @ (obj.mass_u.toarray() + C) @ S + obj.regularization.toarray()


def dense_b(ctx):
    m, n = ctx.m, ctx.n
    _check_p(m, n)
    problem = ctx.problem
    S = dense_solution_jacobian(problem, ctx.ev.state)
    Mu = problem.objective.mass_u.toarray()
    Mz = ctx.mass_z.toarray()
    g = ctx.grad_u
    left = np.hstack([np.eye(m), np.kron(np.eye(m), (Mz @ ctx.zbar)[None, :])])
    return S.T @ Mu @ left + np.hstack([np.zeros((n, m)), np.kron(g[None, :], Mz)])


def context_instance(ctx):
    """DenseInstance holding the weights a SensitivityContext uses."""
    prior = ctx.mtheta.prior
    return DenseInstance(ctx.mass_z.toarray(), ctx.mtheta.L.matrix.toarray(),
                         np.linalg.inv(prior.precision.toarray()), ctx.zbar.copy())


def _sqrt_pair(A):
    w, V = eigh(A)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def dense_gsvd(A, Mz, Mtheta):
    """Weighted SVD ``A = W diag(s) Theta^T Mtheta`` via dense square roots."""
    if A.shape[1] > MAX_P:
        raise MemoryError("dense_gsvd size cap exceeded")
    Mz_h, Mz_ih = _sqrt_pair(Mz)
    _, Mt_ih = _sqrt_pair(Mtheta)
    U, s, Vt = np.linalg.svd(Mz_h @ A @ Mt_ih, full_matrices=False)
    return s, Mz_ih @ U, Mt_ih @ Vt.T


def dense_sensitivity(ctx):
    """Dense H^{-1} B, M_z and M_theta for a small context."""
    H = dense_hessian(ctx.problem, ctx.ev)
    B = dense_b(ctx)
    inst = context_instance(ctx)
    return np.linalg.solve(H, B), inst.mass_z, dense_mtheta(inst)


def left_subspace_angle(W1, W2, Mz):
    """Largest principal angle (degrees) between column spaces in the Mz inner product."""
    Mz_h, _ = _sqrt_pair(Mz)
    return float(np.degrees(subspace_angles(Mz_h @ W1, Mz_h @ W2).max()))


def reopt_check(problem, opt, theta, shift, eps=(1e-2, 5e-3, 2.5e-3), gtol=1e-13):
    """Re-optimize with discrepancy ``eps * theta`` and compare to the linearization.

    ``shift`` is the predicted first-order change per unit ``theta``
    (``-H^{-1} B theta``). Reports raw remainders, remainders divided by
    eps, their ratios under successive eps, and a fitted order.
    """
    Mz = problem.mass_z
    norm = lambda v: float(np.sqrt(v @ (Mz @ v)))
    rows = []
    for e in eps:
        if e == 0:
            rows.append({"eps": 0.0, "remainder": 0.0, "normalized": 0.0, "dot": 0.0})
            continue
        pert = problem.with_discrepancy(ThetaDiscrepancy(theta.scaled(e), Mz))
        z_e = solve_optimum(pert, z0=opt.z, gtol=gtol, min_iter=2, n_rayleigh=0).z
        dz = z_e - opt.z
        r = norm(dz - e * shift)
        rows.append({"eps": e, "remainder": r, "normalized": r / e,
                     "dot": float(dz @ (Mz @ shift)) / max(norm(dz) * norm(shift), 1e-300)})
    nz = [r for r in rows if r["eps"] > 0]
    ratios = [a["normalized"] / b["normalized"] for a, b in zip(nz, nz[1:]) if b["normalized"] > 0]
    order = float("nan")
    if len(nz) >= 2 and all(r["remainder"] > 0 for r in nz):
        order = float(np.polyfit(np.log([r["eps"] for r in nz]),
                                 np.log([r["remainder"] for r in nz]), 1)[0])
    return {"rows": rows, "ratios": ratios, "order": order,
            "sign_consistent": all(r["dot"] > 0 for r in nz)}


# ---------------------------------------------------------------------------
# verification suite

def small_context(m_cells=3, beta1=1e-2, target_scale=1.0, threads=1):
    """Sensitivity context for diffusion1d on ``m_cells`` cells (m = cells+1, n = cells)."""
    from .discrepancy import build_L, build_prior
    from .gsvd import SensitivityContext
    from .optctl import ReducedProblem, make_objective
    from .pde import make_model

    model = make_model("diffusion1d", m_cells)
    T = target_scale * model.interpolate_state(lambda x: np.sin(2.0 * x[:, 0]) + x[:, 0])
    problem = ReducedProblem(model, make_objective(model, T, beta1, beta1))
    opt = solve_optimum(problem)
    L = build_L(model.mesh, 1e-1, 5.0, "left")
    prior = build_prior(model.mesh, opt.z, 1.0, 1e-1, nodes=model.control_nodes)
    return SensitivityContext(problem, opt, L, prior, threads=threads)


def run_checks(seed=0, repetitions=20, mutate_x_sign=False):
    """Run the dense-vs-structured checks; returns ``{name: (passed, detail)}``."""
    from .gsvd import GsvdConfig, b_apply, bt_apply, randomized_gsvd

    rng = np.random.default_rng(seed)
    results = {}

    worst = 0.0
    ident = {f"identity_{i}": 0.0 for i in range(1, 5)}
    for _ in range(repetitions):
        inst = random_instance(rng)
        op = inst.operator()
        if mutate_x_sign:
            op.x = -op.x
        Minv = probe(op.inv_apply, inst.m, inst.n)
        worst = max(worst, np.abs(dense_mtheta(inst) @ Minv - np.eye(Minv.shape[0])).max())
        for key, val in appendix_identities(inst, x=op.x).items():
            ident[key] = max(ident[key], val)
    results["closed_form_inverse"] = (worst <= 1e-10, worst)
    for key, val in ident.items():
        results[key] = (val <= 1e-12, val)

    ctx = small_context()
    inst = context_instance(ctx)
    Mt = dense_mtheta(inst)
    err = np.abs(probe(ctx.mtheta.apply, ctx.m, ctx.n) - Mt).max()
    results["mtheta_dense"] = (err <= 1e-10 * max(1.0, np.abs(Mt).max()), err)
    B = dense_b(ctx)
    p = B.shape[1]
    Bs = np.column_stack([b_apply(ctx, Kron2Mat.basis(ctx.m, ctx.n, k))[:, 0] for k in range(p)])
    err = np.abs(Bs - B).max()
    results["b_dense"] = (err <= 1e-10 * max(1.0, np.abs(B).max()), err)
    Bt = np.column_stack([bt_apply(ctx, np.eye(ctx.n)[:, j]).densify()[:, 0] for j in range(ctx.n)])
    err = np.abs(Bt - B.T).max()
    results["bt_dense"] = (err <= 1e-10 * max(1.0, np.abs(B).max()), err)

    A, Mz, Mth = dense_sensitivity(ctx)
    s_ref, W_ref, _ = dense_gsvd(A, Mz, Mth)
    worst_rel, worst_angle = 0.0, 0.0
    for s in range(repetitions):
        res = randomized_gsvd(ctx, GsvdConfig(k=3, oversampling=0, subspace_iterations=2, seed=s))
        worst_rel = max(worst_rel, np.abs(res.sigma[:3] / s_ref[:3] - 1).max())
        worst_angle = max(worst_angle, left_subspace_angle(res.W[:, :3], W_ref[:, :3], Mz))
    results["gsvd_sigma"] = (worst_rel <= 0.01, worst_rel)
    results["gsvd_angle"] = (worst_angle <= 5.0, worst_angle)
    return results
