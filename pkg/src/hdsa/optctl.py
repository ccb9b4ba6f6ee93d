"""Reduced-space optimal control: objective, adjoint derivatives, Newton-CG.

The objective is ``J(u, z) = 1/2 (u - T)^T M_u (u - T) + 1/2 z^T R z`` with
``R = beta1 M_z + beta2 K_z``, so the mixed derivative vanishes by
construction. A :class:`ReducedProblem` optionally carries an affine
discrepancy ``delta(z)`` added to the state, which is how perturbed
problems are re-optimized.
"""

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .pde import Linearization, NonConvergence, second_order_apply, solve_forward

log = logging.getLogger(__name__)


class NonpositiveCurvature(RuntimeError):
    """CG met a direction with p^T H p <= 0."""


class SolveCounters:
    """Thread-safe tallies of operator applications and solves.

    Keys used by the sensitivity code: ``Mz``, ``Mz_solve``, ``L_solve``,
    ``Gamma_inv``, ``Juu``, ``dS``, ``dS_T``, ``H_inv``, ``Jc_solve``,
    ``Jc_solve_T``. Per-call CG iteration counts go to ``cg_iterations``.
    """

    KEYS = ("Mz", "Mz_solve", "L_solve", "Gamma_inv", "Juu", "dS", "dS_T", "H_inv",
            "Jc_solve", "Jc_solve_T")

    def __init__(self):
        self._counts = Counter()
        self.cg_iterations = []
        self._lock = threading.Lock()

    def add(self, key, k=1):
        with self._lock:
            self._counts[key] += k

    def record_cg(self, iterations):
        with self._lock:
            self._counts["H_inv"] += 1
            self.cg_iterations.append(int(iterations))

    def __getitem__(self, key):
        return self._counts[key]

    def snapshot(self):
        with self._lock:
            out = {key: 0 for key in self.KEYS}
            out.update(self._counts)
            out["cg_total"] = int(sum(self.cg_iterations))
            return out

    def reset(self):
        with self._lock:
            self._counts.clear()
            self.cg_iterations = []


def conjugate_gradient(apply, b, rtol=1e-10, maxiter=None, truncate=False):
    """Plain CG for a symmetric positive definite operator.

    Returns ``(x, iterations)``; one iteration is one operator application.
    With ``truncate`` the last iterate is returned instead of raising when
    ``maxiter`` is reached (every CG iterate is a descent direction, which
    is all a Newton step needs).
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    maxiter = maxiter or max(1000, 10 * b.size)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        curv = p @ Ap
        if curv <= 0.0:
            raise NonpositiveCurvature(f"p^T H p = {curv:.3e} at CG iteration {it}")
        alpha = rr / curv
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        if np.sqrt(rr_new) <= rtol * bnorm:
            return x, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    if truncate:
        return x, maxiter
    raise NonConvergence(f"CG reached {maxiter} iterations, |r|/|b| = {np.sqrt(rr) / bnorm:.3e}")


@dataclass
class Objective:
    target: np.ndarray
    mass_u: object
    mass_z: object
    stiffness_z: object
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        self.regularization = self.beta1 * self.mass_z + self.beta2 * self.stiffness_z

    def value(self, u, z):
        e = u - self.target
        return 0.5 * e @ (self.mass_u @ e) + 0.5 * z @ (self.regularization @ z)

    def state_gradient(self, u):
        return self.mass_u @ (u - self.target)

    def state_hessian_apply(self, v):
        return self.mass_u @ v

    def control_gradient(self, z):
        return self.regularization @ z


def make_objective(model, target, beta1=0.0, beta2=0.0):
    nodes = model.control_nodes
    Kz = model.stiffness[nodes][:, nodes]
    return Objective(np.asarray(target, dtype=float), model.mass, model.control_space_mass,
                     Kz, beta1, beta2)


class Evaluation:
    """Forward state, adjoint and factorized Jacobians at one control ``z``."""

    def __init__(self, problem, z):
        self.problem = problem
        self.z = np.array(z, dtype=float)
        model, obj, delta = problem.model, problem.objective, problem.discrepancy
        fwd = solve_forward(model, self.z, rtol=problem.newton_rtol)
        self.state = fwd.state
        self.u = self.state if delta is None else self.state + delta.value(self.z)
        self.lin = Linearization(model, self.state, self.z, problem.counters)
        self.state_gradient = obj.state_gradient(self.u)
        # lam = -Ju^{-T} grad_u J; then grad_z S^T grad_u J = Jz^T lam
        self.adjoint = -self.lin.solve_state_transpose(self.state_gradient)
        g = self.lin.Jz.matrix.T @ self.adjoint + obj.control_gradient(self.z)
        if delta is not None:
            g = g + delta.jac_transpose(self.z, self.state_gradient)
        self.gradient = g
        self.value = obj.value(self.u, self.z)

    def hessvec(self, v):
        """Full Newton Hessian action; one Ju solve and one Ju^T solve."""
        problem = self.problem
        obj, delta = problem.objective, problem.discrepancy
        uhat = -self.lin.solve_state(self.lin.Jz.matrix @ v)
        du = uhat if delta is None else uhat + delta.jac(self.z, v)
        w = obj.state_hessian_apply(du)
        rhs = w + second_order_apply(problem.model, self.state, self.adjoint, uhat)
        Hv = -(self.lin.Jz.matrix.T @ self.lin.solve_state_transpose(rhs))
        Hv = Hv + obj.regularization @ v
        if delta is not None:
            Hv = Hv + delta.jac_transpose(self.z, w)
        return Hv

    def hess_inv_apply(self, v, rtol=None):
        rtol = self.problem.cg_rtol if rtol is None else rtol
        x, its = conjugate_gradient(self.hessvec, v, rtol=rtol)
        if self.problem.counters is not None:
            self.problem.counters.record_cg(its)
        return x


@dataclass
class ReducedProblem:
    model: object
    objective: Objective
    discrepancy: object = None
    counters: SolveCounters = field(default_factory=SolveCounters)
    newton_rtol: float = 1e-10
    cg_rtol: float = 1e-10

    @property
    def mass_z(self):
        return self.objective.mass_z

    def with_discrepancy(self, discrepancy):
        return ReducedProblem(self.model, self.objective, discrepancy, SolveCounters(),
                              self.newton_rtol, self.cg_rtol)

    def at(self, z):
        return Evaluation(self, z)

    def objective_value(self, z):
        return self.at(z).value

    def reduced_gradient(self, z):
        return self.at(z).gradient

    def hessvec(self, z, v):
        return self.at(z).hessvec(v)

    def hess_inv_apply(self, z, v):
        return self.at(z).hess_inv_apply(v)


@dataclass
class OptState:
    z: np.ndarray
    u: np.ndarray
    gradient_norm: float
    gradient_norm_mz: float
    min_rayleigh: float
    history: list
    evaluation: Evaluation = field(repr=False)


def _mz_inv_norm(problem, g):
    from scipy.sparse.linalg import spsolve

    return float(np.sqrt(g @ spsolve(problem.mass_z.tocsc(), g)))


def solve_optimum(problem, z0=None, gtol=1e-8, maxiter=50, min_iter=0, n_rayleigh=10, seed=0):
    """Newton-CG with Armijo backtracking on the reduced objective.

    Converged when ``||g|| <= gtol * max(1, ||g0||)`` (Euclidean, in
    coordinates) and at least ``min_iter`` Newton steps were taken.
    """
    n = problem.model.n
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial control contains non-finite entries")
    ev = problem.at(z)
    g0 = np.linalg.norm(ev.gradient)
    tol = gtol * max(1.0, g0)
    history = [{"iter": 0, "objective": ev.value, "grad_norm": g0, "step": 0.0, "cg": 0}]
    it = 0
    while np.linalg.norm(ev.gradient) > tol or it < min_iter:
        if it >= maxiter:
            raise NonConvergence(
                f"Newton-CG stopped at |g| = {np.linalg.norm(ev.gradient):.3e} > {tol:.3e}",
                history,
            )
        it += 1
        try:
            s, ncg = conjugate_gradient(ev.hessvec, -ev.gradient, rtol=problem.cg_rtol, truncate=True)
        except NonpositiveCurvature:
            s, ncg = -ev.gradient, 0
        slope = ev.gradient @ s
        step = 1.0
        while True:
            trial = problem.at(z + step * s)
            if trial.value <= ev.value + 1e-4 * step * slope or step < 1e-10:
                break
            if abs(trial.value - ev.value) <= 1e-15 * abs(ev.value):
                break
            step *= 0.5
        z, ev = z + step * s, trial
        gn = np.linalg.norm(ev.gradient)
        history.append({"iter": it, "objective": ev.value, "grad_norm": gn, "step": step, "cg": ncg})
        log.debug("newton-cg %d: J=%.6e |g|=%.3e step=%.2g cg=%d", it, ev.value, gn, step, ncg)
    rng = np.random.default_rng(seed)
    Mz = problem.mass_z
    rq = []
    for _ in range(n_rayleigh):
        v = rng.standard_normal(n)
        rq.append((v @ ev.hessvec(v)) / (v @ (Mz @ v)))
    min_rq = min(rq) if rq else float("nan")
    if rq and min_rq <= 0:
        raise NonpositiveCurvature(f"Hessian not positive at the solution (min Rayleigh {min_rq:.3e})")
    return OptState(
        z=z,
        u=ev.state,
        gradient_norm=float(np.linalg.norm(ev.gradient)),
        gradient_norm_mz=_mz_inv_norm(problem, ev.gradient),
        min_rayleigh=float(min_rq),
        history=history,
        evaluation=ev,
    )
