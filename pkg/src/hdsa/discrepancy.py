"""Discrepancy parameters in rank-2 Kronecker form and their inner product.

A discrepancy parameter lives in R^p with p = m(n+1): an intercept block in
R^m followed by m blocks in R^n. Vectors are never stored densely; a family
of d of them is kept as

    col_N = (a u_N ; u_N kron z0) + (b_N u0 ; u0 kron z_N)

with u0, z0 and a shared across columns (:class:`Kron2Mat`). Every
operation below works on m- and n-dimensional pieces only.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .fem import SparseOperator, assemble_mass, assemble_stiffness, boundary_projector

DENSE_CAP = 10_000


@dataclass(frozen=True)
class Kron2Mat:
    u0: np.ndarray
    z0: np.ndarray
    a: float
    b: np.ndarray
    U: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        m, n = self.u0.shape[0], self.z0.shape[0]
        d = self.b.shape[0]
        if self.U.shape != (m, d) or self.Z.shape != (n, d):
            raise ValueError(
                f"inconsistent blocks: u0 {self.u0.shape}, z0 {self.z0.shape}, "
                f"b {self.b.shape}, U {self.U.shape}, Z {self.Z.shape}"
            )

    @property
    def m(self):
        return self.u0.shape[0]

    @property
    def n(self):
        return self.z0.shape[0]

    @property
    def d(self):
        return self.b.shape[0]

    @property
    def shape(self):
        return (self.m * (self.n + 1), self.d)

    @classmethod
    def zeros(cls, m, n, d=1):
        return cls(np.zeros(m), np.zeros(n), 0.0, np.zeros(d), np.zeros((m, d)), np.zeros((n, d)))

    @classmethod
    def from_parts(cls, u=None, z0=None, a=0.0, u0=None, b=0.0, z=None, m=None, n=None):
        """One column from its pieces; missing pieces are zero."""
        m = m if m is not None else len(u if u is not None else u0)
        n = n if n is not None else len(z0 if z0 is not None else z)
        f = lambda v, k: np.zeros(k) if v is None else np.asarray(v, dtype=float)
        return cls(f(u0, m), f(z0, n), float(a), np.array([float(b)]),
                   f(u, m)[:, None], f(z, n)[:, None])

    @classmethod
    def basis(cls, m, n, k):
        """The k-th canonical basis vector of R^p."""
        if k < m:
            e = np.zeros(m)
            e[k] = 1.0
            return cls.from_parts(u=e, a=1.0, n=n)
        i, j = divmod(k - m, n)
        eu = np.zeros(m)
        ez = np.zeros(n)
        eu[i] = 1.0
        ez[j] = 1.0
        return cls.from_parts(u0=eu, z=ez)

    def column(self, j):
        return replace(self, b=self.b[j:j + 1], U=self.U[:, j:j + 1], Z=self.Z[:, j:j + 1])

    def columns(self, idx):
        return replace(self, b=self.b[idx], U=self.U[:, idx], Z=self.Z[:, idx])

    def scaled(self, s):
        return replace(self, b=s * self.b, U=s * self.U, Z=s * self.Z)

    def densify(self):
        """Dense p x d array; test/oracle use only."""
        m, n = self.m, self.n
        if m * (n + 1) > DENSE_CAP:
            raise MemoryError(f"refusing to densify p = {m * (n + 1)} > {DENSE_CAP}")
        top = self.a * self.U + np.outer(self.u0, self.b)
        bottom = (self.U[:, None, :] * self.z0[None, :, None]
                  + self.u0[:, None, None] * self.Z[None, :, :]).reshape(m * n, self.d)
        return np.vstack([top, bottom])


ThetaVector = Kron2Mat


def kron2_gram(X, Y):
    """Matrix of Euclidean inner products ``X^T Y`` of the logical columns."""
    if X.m != Y.m or X.n != Y.n:
        raise ValueError("operands live in different spaces")
    UV = X.U.T @ Y.U
    Uv0 = X.U.T @ Y.u0
    u0V = X.u0 @ Y.U
    u0v0 = X.u0 @ Y.u0
    z0w0 = X.z0 @ Y.z0
    z0W = X.z0 @ Y.Z
    Zw0 = X.Z.T @ Y.z0
    ZW = X.Z.T @ Y.Z
    return (
        (X.a * Y.a + z0w0) * UV
        + np.outer(Uv0, X.a * Y.b + z0W)
        + np.outer(X.b * Y.a + Zw0, u0V)
        + u0v0 * (np.outer(X.b, Y.b) + ZW)
    )


def kron2_inner(y1, y2, weight=None):
    """Inner product of two single-column Kron2Mat vectors.

    ``weight`` is an optional callable mapping Kron2Mat to Kron2Mat (for
    example :meth:`MthetaOperator.apply`), giving ``y1^T W y2``.
    """
    if weight is not None:
        y2 = weight(y2)
    G = kron2_gram(y1, y2)
    if G.shape != (1, 1):
        raise ValueError("kron2_inner expects single columns; use kron2_gram")
    return float(G[0, 0])


def kron2_column_combine(A, R):
    """Logical product ``A @ R`` for a small dense ``R`` (d x d')."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != A.d:
        raise ValueError(f"R must have {A.d} rows, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("R contains non-finite entries")
    # a, u0, z0 are shared and untouched: every column is linear in (u_N, b_N, z_N)
    return replace(A, b=R.T @ A.b, U=A.U @ R, Z=A.Z @ R)


def delta_eval(z, theta, mass_z):
    """delta(z, theta) = (I_m, I_m kron z^T M_z) theta for each column, (m x d)."""
    Mz_z = mass_z @ np.asarray(z, dtype=float)
    c1 = theta.a + Mz_z @ theta.z0
    c2 = theta.b + Mz_z @ theta.Z
    out = c1 * theta.U + np.outer(theta.u0, c2)
    return out[:, 0] if out.shape[1] == 1 else out


def delta_combo(z, c, modes):
    """Discrepancy of ``sum_N c_N theta_N`` evaluated at ``z``, centred at z-bar.

    ``modes`` needs ``theta`` (Kron2Mat), ``zbar`` and ``mass_z``.
    """
    c = np.asarray(c, dtype=float)
    th = modes.theta
    k = c.shape[0]
    if k > th.d:
        raise ValueError(f"only {th.d} modes available, got {k} coefficients")
    Mz = modes.mass_z
    zbar = modes.zbar
    U, Z, b = th.U[:, :k], th.Z[:, :k], th.b[:k]
    Uc = U @ c
    Zc = Z @ c
    zbar_Mz = Mz @ zbar
    dz_Mz = Mz @ (np.asarray(z, dtype=float) - zbar)
    return (
        (th.a + zbar_Mz @ th.z0) * Uc
        + (c @ b + zbar_Mz @ Zc) * th.u0
        + (dz_Mz @ th.z0) * Uc
        + (dz_Mz @ Zc) * th.u0
    )


class ThetaDiscrepancy:
    """The affine map ``z -> delta(z, theta)`` for a single parameter column."""

    def __init__(self, theta, mass_z):
        if theta.d != 1:
            raise ValueError("expected a single column")
        self.theta = theta
        self.mass_z = mass_z
        self._Mz_z0 = mass_z @ theta.z0
        self._Mz_zN = mass_z @ theta.Z[:, 0]

    def value(self, z):
        return delta_eval(z, self.theta, self.mass_z)

    def jac(self, z, v):
        return (self._Mz_z0 @ v) * self.theta.U[:, 0] + (self._Mz_zN @ v) * self.theta.u0

    def jac_transpose(self, z, w):
        return (self.theta.U[:, 0] @ w) * self._Mz_z0 + (self.theta.u0 @ w) * self._Mz_zN


# ---------------------------------------------------------------------------
# weighting operators

class WeightingL:
    """SPD state weighting ``L = K + tau P^T P`` with a cached factorization."""

    def __init__(self, matrix, K=None, tau=0.0, projector=None):
        self.op = SparseOperator(matrix, "L").factorize()
        self.K = K
        self.tau = tau
        self.projector = projector

    @classmethod
    def from_matrix(cls, A):
        return cls(sp.csr_matrix(A))

    @property
    def matrix(self):
        return self.op.matrix

    def apply(self, x):
        return self.op.apply(x)

    def solve(self, b):
        return self.op.solve(b)


def build_L(mesh, epsilon=1e-3, tau=50.0, boundary=None):
    """``K = epsilon * stiffness + mass`` plus a boundary penalty ``tau P^T P``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    K = (epsilon * assemble_stiffness(mesh).matrix + assemble_mass(mesh).matrix).tocsr()
    P = None
    L = K
    if boundary is not None:
        P = boundary_projector(mesh, boundary)
        Pm = P.matrix()
        L = (K + tau * (Pm.T @ Pm)).tocsr()
    return WeightingL(L, K=K, tau=tau, projector=P)


class GaussianPrior:
    """Gaussian measure on controls with mean ``z-bar`` and sparse precision.

    ``apply_inv`` is a matvec with the precision Gamma^{-1}; ``apply`` is a
    solve with it (the covariance action).
    """

    def __init__(self, mean, precision):
        self.mean = np.asarray(mean, dtype=float)
        self.precision = SparseOperator(precision, "Gamma^-1").factorize()

    def apply_inv(self, v):
        return self.precision.apply(v)

    def apply(self, v):
        return self.precision.solve(v)


def build_prior(mesh, zbar, alpha=1.0, beta=1e-6, nodes=None):
    """Precision ``alpha^-2 (beta K + M)`` on the given control nodes."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    A = (beta * assemble_stiffness(mesh).matrix + assemble_mass(mesh).matrix) / alpha**2
    if nodes is not None:
        A = A[nodes][:, nodes]
    return GaussianPrior(zbar, A.tocsr())


class MthetaOperator:
    """The weighting M_theta and its closed-form inverse, applied blockwise.

        M_theta = [[L, L kron zbar^T Mz], [L kron Mz zbar, L kron E]]
        E = Mz (Gamma + zbar zbar^T) Mz

    Construction computes ``Mz zbar``, ``Gamma^{-1} zbar``, ``beta_hat`` and
    ``x`` once. If the caller registers the shared intercept ``u0`` with
    :meth:`prime`, ``L^{-1} u0`` is cached too, and columns whose shared
    blocks are exactly (``u0``, ``Mz zbar``) reuse the cached images.
    """

    def __init__(self, L, mass_z, prior, counters=None):
        self.L = L
        self.mass_z = mass_z if isinstance(mass_z, SparseOperator) else SparseOperator(mass_z, "Mz")
        self.mass_z.factorize()
        self.prior = prior
        self.counters = counters
        self.zbar = prior.mean
        self.z0 = self._mz(self.zbar)
        self.gamma_inv_zbar = self._gamma_inv(self.zbar)
        self.beta_hat = float(self.zbar @ self.gamma_inv_zbar)
        # (Gamma^-1 - G) zbar = Gamma^-1 zbar / (1 + beta_hat)
        self.x = self._mz_solve(self.gamma_inv_zbar) / (1.0 + self.beta_hat)
        self._u0 = None
        self._Linv_u0 = None

    def _count(self, key, k=1):
        if self.counters is not None:
            self.counters.add(key, k)

    def _mz(self, v):
        self._count("Mz")
        return self.mass_z.matrix @ v

    def _mz_solve(self, v):
        self._count("Mz_solve")
        return self.mass_z.solve(v)

    def _gamma_inv(self, v):
        self._count("Gamma_inv")
        return self.prior.apply_inv(v)

    def _L_solve(self, v):
        self._count("L_solve")
        return self.L.solve(v)

    def prime(self, u0):
        self._u0 = u0
        self._Linv_u0 = self._L_solve(u0)

    def N_apply(self, v):
        """N v = (1 + beta_hat)^-1 Mz^-1 Gamma^-1 Mz^-1 v."""
        return self._mz_solve(self._gamma_inv(self._mz_solve(v))) / (1.0 + self.beta_hat)

    def E_apply(self, v):
        Mv = self.mass_z.matrix @ v
        return self.mass_z.matrix @ (self.prior.apply(Mv) + self.zbar * (self.zbar @ Mv))

    def apply(self, Y):
        Mz = self.mass_z.matrix
        Lm = self.L.matrix
        zbar_Mz = Mz @ self.zbar
        E = self.E_apply
        EZ = np.column_stack([E(Y.Z[:, j]) for j in range(Y.d)]) if Y.d else Y.Z.copy()
        return Kron2Mat(
            u0=Lm @ Y.u0,
            z0=Y.a * zbar_Mz + E(Y.z0),
            a=Y.a + zbar_Mz @ Y.z0,
            b=Y.b + zbar_Mz @ Y.Z,
            U=Lm @ Y.U,
            Z=EZ + np.outer(zbar_Mz, Y.b),
        )

    def inv_apply(self, Y):
        s = 1.0 + self.beta_hat
        x = self.x
        if self._u0 is not None and Y.u0 is self._u0:
            Linv_u0 = self._Linv_u0
        else:
            Linv_u0 = self._L_solve(Y.u0)
        if Y.z0 is self.z0:
            N_z0 = x  # N Mz zbar equals x exactly
        else:
            N_z0 = self.N_apply(Y.z0)
        LU = np.column_stack([self._L_solve(Y.U[:, j]) for j in range(Y.d)])
        NZ = np.column_stack([self.N_apply(Y.Z[:, j]) for j in range(Y.d)])
        return Kron2Mat(
            u0=Linv_u0,
            z0=s * (N_z0 - Y.a * x),
            a=s * (Y.a - x @ Y.z0),
            b=s * (Y.b - x @ Y.Z),
            U=LU.reshape(Y.m, Y.d),
            Z=s * (NZ.reshape(Y.n, Y.d) - np.outer(x, Y.b)),
        )


def mtheta_apply(op, theta):
    return op.apply(theta)


def mtheta_inv_apply(op, theta):
    return op.inv_apply(theta)
