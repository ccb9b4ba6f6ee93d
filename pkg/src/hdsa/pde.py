"""Model PDEs as residual/Jacobian providers, plus a Newton forward solver.

Three models are available:

``diffusion1d``   -u'' = z on (0,1), u(0) = 0, u'(1) = 0
``advdiff1d``     -u'' + u' = z, same boundary conditions
``cdr2d``         -nu lap(u) + v . grad(u) = z + u^3 + u on (0,1)^2,
                  u = 0 on the bottom edge, natural conditions elsewhere

Dirichlet rows of the residual are replaced by ``u_i`` so the state Jacobian
stays square and invertible.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (
    SparseOperator,
    assemble_advection,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_mass,
    evaluate_at_quadrature,
    interval_mesh,
    unit_square_mesh,
)

log = logging.getLogger(__name__)

MODEL_NAMES = ("diffusion1d", "advdiff1d", "cdr2d")


class NonConvergence(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


def cdr_velocity(points):
    x1, x2 = points[..., 0], points[..., 1]
    return np.stack([np.cos(2 * np.pi * x1), 1.0 + np.cos(2 * np.pi * x2) ** 2], axis=-1)


@dataclass(frozen=True, eq=False)
class PdeModel:
    name: str
    mesh: object
    nu: float
    reaction: bool
    stiffness: sp.csr_matrix
    advection: sp.csr_matrix
    mass: sp.csr_matrix
    dirichlet: np.ndarray
    control_nodes: np.ndarray
    _free_mask: np.ndarray = field(repr=False, default=None)

    @property
    def m(self):
        return self.mesh.num_nodes

    @property
    def n(self):
        return self.control_nodes.size

    @property
    def control_mass(self):
        """M_uz: state-by-control mass matrix (m x n)."""
        return self.mass[:, self.control_nodes]

    @property
    def control_space_mass(self):
        """M_z: Gram matrix of the control basis (n x n)."""
        return self.mass[self.control_nodes][:, self.control_nodes]

    @property
    def free_rows(self):
        return sp.diags(self._free_mask.astype(float))

    def control_to_nodes(self, z):
        out = np.zeros(self.m)
        out[self.control_nodes] = z
        return out

    def interpolate_control(self, f):
        """Nodal interpolant of ``f(x)`` restricted to the control nodes."""
        return np.asarray(f(self.mesh.coords[self.control_nodes]), dtype=float)

    def interpolate_state(self, f):
        return np.asarray(f(self.mesh.coords), dtype=float)

    def _check(self, u, z):
        if u.shape != (self.m,):
            raise ValueError(f"state must have length {self.m}, got {u.shape}")
        if z.shape != (self.n,):
            raise ValueError(f"control must have length {self.n}, got {z.shape}")


def make_model(name, resolution, controls=None):
    """Build one of the named models on a uniform mesh.

    ``resolution`` is the number of cells (1D) or cells per side (2D).
    ``controls`` is ``"free"`` (non-Dirichlet nodes) or ``"all"``; the
    default is ``"free"`` for the 1D models and ``"all"`` for cdr2d.
    Controls on Dirichlet nodes never reach the state and are held only
    by the regularization.
    """
    if name in ("diffusion1d", "advdiff1d"):
        mesh = interval_mesh(resolution)
        velocity = 0.0 if name == "diffusion1d" else 1.0
        nu, reaction = 1.0, False
        dirichlet = mesh.nodes_with_tag("left")
    elif name == "cdr2d":
        mesh = unit_square_mesh(resolution)
        velocity = cdr_velocity
        nu, reaction = 1.0, True
        dirichlet = mesh.nodes_with_tag("bottom")
    else:
        raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    free = np.ones(mesh.num_nodes, dtype=bool)
    free[dirichlet] = False
    controls = controls or ("all" if name == "cdr2d" else "free")
    if controls not in ("free", "all"):
        raise ValueError(f"controls must be 'free' or 'all', got {controls!r}")
    return PdeModel(
        name=name,
        mesh=mesh,
        nu=nu,
        reaction=reaction,
        stiffness=assemble_stiffness(mesh, 1.0).matrix,
        advection=assemble_advection(mesh, velocity).matrix,
        mass=assemble_mass(mesh).matrix,
        dirichlet=dirichlet,
        control_nodes=np.flatnonzero(free) if controls == "free" else np.arange(mesh.num_nodes),
        _free_mask=free,
    )


def _reaction_load(model, u):
    uq = evaluate_at_quadrature(model.mesh, u)
    return assemble_load(model.mesh, uq ** 3 + uq)


def residual(model, u, z):
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    model._check(u, z)
    r = model.nu * (model.stiffness @ u) + model.advection @ u - model.control_mass @ z
    if model.reaction:
        r -= _reaction_load(model, u)
    r[model.dirichlet] = u[model.dirichlet]
    return r


def _replace_dirichlet_rows(model, A):
    D = sp.csr_matrix(
        (np.ones(model.dirichlet.size), (model.dirichlet, model.dirichlet)),
        shape=(model.m, model.m),
    )
    return (model.free_rows @ A + D).tocsr()


def jacobian_state(model, u, z=None):
    u = np.asarray(u, dtype=float)
    A = model.nu * model.stiffness + model.advection
    if model.reaction:
        uq = evaluate_at_quadrature(model.mesh, u)
        A = A - assemble_weighted_mass(model.mesh, 3 * uq ** 2 + 1)
    return SparseOperator(_replace_dirichlet_rows(model, A), "state jacobian")


def jacobian_control(model, u=None, z=None):
    return SparseOperator((-(model.free_rows @ model.control_mass)).tocsr(), "control jacobian")


def second_order_matrix(model, u, lam):
    """Matrix of ``w -> (lam . c_uu)[w]`` for the residual at state ``u``.

    Dirichlet rows are linear in ``u`` and contribute nothing, so their
    multiplier entries are ignored.
    """
    if not model.reaction:
        return sp.csr_matrix((model.m, model.m))
    lam = np.where(model._free_mask, lam, 0.0)
    uq = evaluate_at_quadrature(model.mesh, u)
    lq = evaluate_at_quadrature(model.mesh, lam)
    return -assemble_weighted_mass(model.mesh, 6.0 * uq * lq)


def second_order_apply(model, u, lam, w):
    if not model.reaction:
        return np.zeros(model.m)
    lam = np.where(model._free_mask, lam, 0.0)
    uq = evaluate_at_quadrature(model.mesh, u)
    lq = evaluate_at_quadrature(model.mesh, lam)
    wq = evaluate_at_quadrature(model.mesh, w)
    return -assemble_load(model.mesh, 6.0 * uq * lq * wq)


@dataclass
class ForwardSolveResult:
    state: np.ndarray
    iterations: int
    residual_norm: float
    history: list = field(default_factory=list)


def solve_forward(model, z, u0=None, rtol=1e-10, maxiter=50):
    """Newton's method with backtracking on the residual norm.

    Stops once ``||r|| <= rtol * max(1, ||r(0, z)||)``; at least one Newton
    step is always taken.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("control contains non-finite entries")
    u = np.zeros(model.m) if u0 is None else np.array(u0, dtype=float)
    tol = rtol * max(1.0, np.linalg.norm(residual(model, np.zeros(model.m), z)))
    r = residual(model, u, z)
    rnorm = np.linalg.norm(r)
    history = [rnorm]
    for it in range(1, maxiter + 1):
        J = jacobian_state(model, u, z).factorize()
        du = -J.solve(r)
        step = 1.0
        while True:
            trial = u + step * du
            r_trial = residual(model, trial, z)
            n_trial = np.linalg.norm(r_trial)
            if n_trial < (1 - 1e-4 * step) * rnorm or n_trial <= tol or step < 1e-8:
                break
            step *= 0.5
        u, r, rnorm = trial, r_trial, n_trial
        history.append(rnorm)
        if rnorm <= tol:
            u[model.dirichlet] = 0.0
            return ForwardSolveResult(u, it, rnorm, history)
    raise NonConvergence(
        f"Newton did not converge for {model.name}: |r| = {rnorm:.3e} > {tol:.3e}", history
    )


class Linearization:
    """Factorized state Jacobian and control Jacobian at a fixed ``(u, z)``.

    ``counters`` (optional) receives ``Jc_solve``/``Jc_solve_T`` for every
    linear solve and ``dS``/``dS_T`` for each solution-Jacobian product.
    """

    def __init__(self, model, u, z, counters=None):
        self.model = model
        self.u = np.asarray(u, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.counters = counters
        self.Ju = jacobian_state(model, u, z).factorize()
        self.Jz = jacobian_control(model, u, z)

    def _count(self, key):
        if self.counters is not None:
            self.counters.add(key)

    def solve_state(self, b):
        self._count("Jc_solve")
        return self.Ju.solve(b)

    def solve_state_transpose(self, b):
        self._count("Jc_solve_T")
        return self.Ju.solve_transpose(b)

    def solution_jacobian(self, v):
        """grad_z S v = -Ju^{-1} Jz v."""
        self._count("dS")
        return -self.solve_state(self.Jz.matrix @ v)

    def solution_jacobian_transpose(self, w):
        """grad_z S^T w = -Jz^T Ju^{-T} w."""
        self._count("dS_T")
        return -(self.Jz.matrix.T @ self.solve_state_transpose(w))


def apply_solution_jacobian(model, u, z, v, counters=None):
    return Linearization(model, u, z, counters).solution_jacobian(v)


def apply_solution_jacobian_transpose(model, u, z, w, counters=None):
    return Linearization(model, u, z, counters).solution_jacobian_transpose(w)


class ModelPairDiscrepancy:
    """Discrepancy ``d(z) = S_hi(z) - S_lo(z)`` between two linear models.

    Both models must share the mesh and Dirichlet set, and be linear in the
    state so that ``d`` is linear in ``z``. ``scale`` multiplies the result.
    """

    def __init__(self, high, low, scale=1.0):
        if high.reaction or low.reaction:
            raise ValueError("model-pair discrepancy requires linear models")
        if high.m != low.m or not np.array_equal(high.control_nodes, low.control_nodes):
            raise ValueError("models must share the discretization")
        self.high, self.low, self.scale = high, low, scale
        zero = np.zeros(low.m)
        zc = np.zeros(low.n)
        self._hi = Linearization(high, zero, zc)
        self._lo = Linearization(low, zero, zc)

    def scaled(self, scale):
        return ModelPairDiscrepancy(self.high, self.low, self.scale * scale)

    def value(self, z):
        return self.jac(z, z)

    def jac(self, z, v):
        return self.scale * (self._hi.solution_jacobian(v) - self._lo.solution_jacobian(v))

    def jac_transpose(self, z, w):
        return self.scale * (
            self._hi.solution_jacobian_transpose(w) - self._lo.solution_jacobian_transpose(w)
        )
