"""Randomized generalized SVD of the discrepancy sensitivity ``H^{-1} B``.

The domain inner product is M_theta and the range inner product is M_z.
All p-dimensional blocks are :class:`~hdsa.discrepancy.Kron2Mat` objects;
H^{-1} is applied column by column with CG, optionally on a thread pool.
Columns are independent and written back in order, so results do not
depend on the number of threads.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.sparse.linalg import aslinearoperator

from .discrepancy import Kron2Mat, MthetaOperator, kron2_column_combine, kron2_gram

log = logging.getLogger(__name__)


class CholeskyBreakdown(np.linalg.LinAlgError):
    """Gram matrix in CholQR is not numerically positive definite."""

    def __init__(self, pivot, gram):
        super().__init__(f"Cholesky failed at pivot {pivot} of {gram.shape[0]}")
        self.pivot = pivot
        self.gram = gram


@dataclass(frozen=True)
class GsvdConfig:
    k: int
    oversampling: int = 8
    subspace_iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.oversampling < 0 or self.subspace_iterations < 0:
            raise ValueError("need k >= 1, oversampling >= 0, subspace_iterations >= 0")

    @property
    def d(self):
        return self.k + self.oversampling


@dataclass
class GsvdResult:
    sigma: np.ndarray
    W: np.ndarray
    theta: Kron2Mat
    zbar: np.ndarray
    mass_z: object
    left_orthonormality: float
    right_orthonormality: float
    counters: dict
    cg_iterations: list
    d: int
    q: int

    @property
    def k(self):
        return self.sigma.size


class SensitivityContext:
    """Everything needed to apply B, B^T and H^{-1} at the optimum.

    ``counters`` of the problem are snapshotted after construction; those
    counts are the one-off initialization cost.
    """

    def __init__(self, problem, opt, L, prior, threads=None):
        self.problem = problem
        self.opt = opt
        self.ev = opt.evaluation
        self.counters = problem.counters
        self.threads = threads or int(os.environ.get("HDSA_THREADS", "1"))
        before = self.counters.snapshot()
        self.mass_z = problem.mass_z
        self.Juu = problem.objective.state_hessian_apply
        self.grad_u = self.ev.state_gradient
        self.mtheta = MthetaOperator(L, self.mass_z, prior, self.counters)
        self.z0 = self.mtheta.z0
        self.u0 = self.grad_u
        self.mtheta.prime(self.u0)
        after = self.counters.snapshot()
        self.init_counts = {k: after.get(k, 0) - before.get(k, 0) for k in after}

    @property
    def zbar(self):
        return self.opt.z

    @property
    def m(self):
        return self.problem.model.m

    @property
    def n(self):
        return self.problem.model.n

    def _mz(self, v):
        self.counters.add("Mz")
        return self.mass_z @ v

    def _juu(self, v):
        self.counters.add("Juu")
        return self.Juu(v)

    def hinv(self, V):
        """Apply H^{-1} to every column of ``V`` (n x d)."""
        V = np.atleast_2d(V.T).T
        cols = [V[:, j] for j in range(V.shape[1])]
        if self.threads > 1 and len(cols) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                out = list(pool.map(self.ev.hess_inv_apply, cols))
        else:
            out = [self.ev.hess_inv_apply(c) for c in cols]
        return np.column_stack(out)


def b_apply(ctx, Y):
    """B Y for a Kron2Mat ``Y``; returns n x d.

    The shared ``u0`` block needs a single solution-Jacobian product.
    """
    lin = ctx.ev.lin
    zbar_Mz = ctx.z0
    out = np.zeros((ctx.n, Y.d))
    Mz_z0 = ctx._mz(Y.z0)
    coef1 = Y.a + zbar_Mz @ Y.z0
    g_u0 = lin.solution_jacobian_transpose(ctx._juu(Y.u0))
    gu_dot_u0 = ctx.grad_u @ Y.u0
    for j in range(Y.d):
        uN = Y.U[:, j]
        col = coef1 * lin.solution_jacobian_transpose(ctx._juu(uN))
        col += (ctx.grad_u @ uN) * Mz_z0
        col += (Y.b[j] + zbar_Mz @ Y.Z[:, j]) * g_u0
        col += gu_dot_u0 * ctx._mz(Y.Z[:, j])
        out[:, j] = col
    return out


def bt_apply(ctx, V):
    """B^T V as a Kron2Mat with shared blocks (grad_u J, Mz zbar)."""
    lin = ctx.ev.lin
    V = np.atleast_2d(np.asarray(V, dtype=float).T).T
    d = V.shape[1]
    G = np.zeros((ctx.m, d))
    Z = np.zeros((ctx.n, d))
    for j in range(d):
        G[:, j] = ctx._juu(lin.solution_jacobian(V[:, j]))
        Z[:, j] = ctx._mz(V[:, j])
    return Kron2Mat(u0=ctx.u0, z0=ctx.z0, a=1.0, b=np.zeros(d), U=G, Z=Z)


def correlated_draw(rng, a, b):
    """One draw of (omega_u, omega_z) with covariance

        [[|a|^2 I_m, b a^T], [a b^T, |b|^2 I_n]]

    using m + n standard normals.
    """
    m, n = b.size, a.size
    g = rng.standard_normal(m)
    h = rng.standard_normal(n)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    omega_u = na * g
    if na > 0:
        ah = a / na
        omega_z = ah * (b @ g) + nb * (h - ah * (ah @ h))
    else:
        omega_z = nb * h
    return omega_u, omega_z


def _column_rng(seed, column):
    return np.random.default_rng([int(seed), int(column)])


def sample_b_omega(ctx, d, seed=0):
    """Columns distributed as B omega with omega ~ N(0, I_p), built in R^m and R^n."""
    lin = ctx.ev.lin
    out = np.zeros((ctx.n, d))
    for j in range(d):
        rng = _column_rng(seed, j)
        w0 = rng.standard_normal(ctx.m)
        wu, wz = correlated_draw(rng, ctx.z0, ctx.grad_u)
        out[:, j] = lin.solution_jacobian_transpose(ctx._juu(w0 + wu)) + ctx._mz(wz)
    return out


def _chol_upper(C):
    C = 0.5 * (C + C.T)
    R, info = lapack.dpotrf(C, lower=0, clean=1)
    if info != 0:
        raise CholeskyBreakdown(info, C)
    return R


def cholqr(Y, M=None, MY=None):
    """Cholesky QR in the inner product of ``M``: returns ``(Q, MQ, R)``.

    ``Y`` is a dense n x d array or a Kron2Mat. ``M`` maps the same kind of
    object to its image (column-wise callable for arrays); pass ``MY``
    instead when ``M Y`` is already known.
    """
    if MY is None:
        if M is None:
            MY = Y
        elif isinstance(Y, Kron2Mat):
            MY = M(Y)
        else:
            MY = np.column_stack([M(Y[:, j]) for j in range(Y.shape[1])])
    if isinstance(Y, Kron2Mat):
        C = kron2_gram(Y, MY)
    else:
        C = Y.T @ MY
    R = _chol_upper(C)
    Rinv = solve_triangular(R, np.eye(R.shape[0]), lower=False)
    if isinstance(Y, Kron2Mat):
        return kron2_column_combine(Y, Rinv), kron2_column_combine(MY, Rinv), R
    return Y @ Rinv, MY @ Rinv, R


def table2_expected(q, d, cg_total):
    """Large-solve totals for one run, given the total CG iteration count."""
    return {
        "Mz_solve": 2 * (q + 1) * d + 1,
        "L_solve": (q + 1) * d + 1,
        "Jc_solve": (q + 1) * d + cg_total,
        "Jc_solve_T": (q + 1) * d + cg_total + q,
    }


def table1_expected(q, d):
    """Operator-application totals (excluding H^{-1}-internal work)."""
    return {
        "Mz": 1 + 2 * d + q * (3 * d + 1) + d,
        "Mz_solve": 2 * (q + 1) * d + 1,
        "Gamma_inv": 1 + (q + 1) * d,
        "L_solve": (q + 1) * d + 1,
        "Juu": d + q * (2 * d + 1) + d,
        "dS": (q + 1) * d,
        "dS_T": d + q * (d + 1),
        "H_inv": 2 * (q + 1) * d,
    }


def randomized_gsvd(ctx, cfg, trace=None):
    """Truncated GSVD ``H^{-1} B ~ W diag(sigma) Theta^T M_theta``.

    The sketch width is ``min(k + oversampling, n)``. If ``trace`` is a
    dict, intermediate blocks are stored in it for inspection.
    """
    q = cfg.subspace_iterations
    d = min(cfg.d, ctx.n)
    if d < cfg.d:
        log.warning("sketch width %d exceeds control dimension; using %d", cfg.d, d)
    counters = ctx.counters
    before = counters.snapshot()
    n_cg_before = len(counters.cg_iterations)
    Mz = ctx.mass_z

    Y = ctx.hinv(sample_b_omega(ctx, d, cfg.seed))
    Q, MzQ, _ = cholqr(Y, ctx._mz)
    if trace is not None:
        trace["Y0"] = Y
    for it in range(q):
        Yk = bt_apply(ctx, ctx.hinv(MzQ))
        _, MinvQ, _ = cholqr(Yk, ctx.mtheta.inv_apply)
        Y = ctx.hinv(b_apply(ctx, MinvQ))
        Q, MzQ, _ = cholqr(Y, ctx._mz)
        if trace is not None:
            trace[f"Ytheta{it}"] = Yk
            trace[f"MinvQ{it}"] = MinvQ
            trace[f"Y{it + 1}"] = Y
    Wk = bt_apply(ctx, ctx.hinv(MzQ))
    MinvW = ctx.mtheta.inv_apply(Wk)
    QW, _, RW = cholqr(MinvW, MY=Wk)
    Uw, sigma, VwT = np.linalg.svd(RW.T)
    sigma = np.where(sigma < 1e-14 * sigma[0], 0.0, sigma)
    W = Q @ Uw
    theta = kron2_column_combine(QW, VwT.T)
    if trace is not None:
        trace.update(W_block=Wk, MinvW=MinvW, QW=QW, Q=Q)

    after = counters.snapshot()
    run = {k: after.get(k, 0) - before.get(k, 0) for k in after}
    totals = {k: ctx.init_counts.get(k, 0) + run.get(k, 0)
              for k in set(run) | set(ctx.init_counts)}
    totals["cg_total"] = run.get("cg_total", 0)
    cg_its = list(counters.cg_iterations[n_cg_before:])

    left = np.abs(W.T @ (Mz @ W) - np.eye(d)).max()
    right = np.abs(kron2_gram(theta, ctx.mtheta.apply(theta)) - np.eye(d)).max()
    return GsvdResult(sigma, W, theta, ctx.zbar.copy(), Mz, float(left), float(right),
                      totals, cg_its, d, q)


def apply_sensitivity_to_discrepancy(ctx, d_value, d_jacobian):
    """First-order optimum shift for an explicit discrepancy direction.

    ``d_value`` is d(z-bar) in R^m and ``d_jacobian`` its z-Jacobian
    (anything :func:`scipy.sparse.linalg.aslinearoperator` accepts, or an
    object with ``jac_transpose``). Returns ``-H^{-1}(grad_z S^T Juu d +
    (grad_z d)^T grad_u J)``.
    """
    lin = ctx.ev.lin
    if hasattr(d_jacobian, "jac_transpose"):
        dT_g = d_jacobian.jac_transpose(ctx.zbar, ctx.grad_u)
    else:
        dT_g = aslinearoperator(d_jacobian).rmatvec(ctx.grad_u)
    rhs = lin.solution_jacobian_transpose(ctx.Juu(np.asarray(d_value, dtype=float))) + dT_g
    return -ctx.ev.hess_inv_apply(rhs)
