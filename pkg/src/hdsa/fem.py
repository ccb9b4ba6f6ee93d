"""Piecewise-linear finite elements on 1D intervals and structured 2D grids.

Everything here is plain scipy.sparse assembly. Element integrals use a
quadrature rule that is exact for polynomials of degree 5 on each element,
which is enough for the cubic reaction term and its derivatives.
"""

import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "Mesh",
    "SparseOperator",
    "BoundaryProjector",
    "interval_mesh",
    "unit_square_mesh",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_advection",
    "assemble_weighted_mass",
    "assemble_load",
    "boundary_projector",
    "quadrature",
    "evaluate_at_quadrature",
]


@dataclass(frozen=True)
class Mesh:
    """Simplicial mesh with named boundary tags.

    ``tags[i]`` is the boundary name of node ``i`` or ``""`` for interior
    nodes. Each boundary node carries exactly one tag.
    """

    dim: int
    coords: np.ndarray
    cells: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("mesh dimension must be 1 or 2")
        if self.coords.shape[0] < 2:
            raise ValueError("mesh needs at least two nodes")
        if self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must be intervals (1D) or triangles (2D)")
        if self.cells.min() < 0 or self.cells.max() >= self.coords.shape[0]:
            raise ValueError("cell references a node outside the mesh")
        if self.tags.shape[0] != self.coords.shape[0]:
            raise ValueError("one tag per node required")

    @property
    def num_nodes(self):
        return self.coords.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def nodes_with_tag(self, tag):
        idx = np.flatnonzero(self.tags == tag)
        if idx.size == 0:
            raise KeyError(f"no boundary tagged {tag!r}")
        return idx


def interval_mesh(num_cells, a=0.0, b=1.0):
    """Uniform mesh of ``[a, b]`` with boundary tags ``left`` and ``right``."""
    if num_cells < 1:
        raise ValueError("need at least one cell")
    x = np.linspace(a, b, num_cells + 1)
    cells = np.column_stack([np.arange(num_cells), np.arange(1, num_cells + 1)])
    tags = np.full(num_cells + 1, "", dtype=object)
    tags[0] = "left"
    tags[-1] = "right"
    return Mesh(1, x[:, None], cells, tags)


def unit_square_mesh(n):
    """Structured triangulation of (0,1)^2 with ``(n+1)**2`` nodes.

    Node ``i + j*(n+1)`` sits at ``(i/n, j/n)``. Corners belong to the
    ``bottom`` and ``top`` edges; ``left``/``right`` hold the remaining side
    nodes.
    """
    if n < 1:
        raise ValueError("need at least one cell per side")
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t)
    coords = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i = i.ravel()
    j = j.ravel()
    n00 = i + j * (n + 1)
    n10 = n00 + 1
    n01 = n00 + n + 1
    n11 = n01 + 1
    cells = np.concatenate(
        [np.column_stack([n00, n10, n11]), np.column_stack([n00, n11, n01])]
    )
    tags = np.full((n + 1) ** 2, "", dtype=object)
    x, y = coords[:, 0], coords[:, 1]
    tags[np.isclose(x, 0.0)] = "left"
    tags[np.isclose(x, 1.0)] = "right"
    tags[np.isclose(y, 0.0)] = "bottom"
    tags[np.isclose(y, 1.0)] = "top"
    return Mesh(2, coords, cells, tags)


# ---------------------------------------------------------------------------
# quadrature

def _reference_rule(dim):
    """Barycentric points and weights (summing to 1), exact to degree 5."""
    if dim == 1:
        g = np.sqrt(3.0 / 5.0)
        s = 0.5 * (1.0 + np.array([-g, 0.0, g]))
        lam = np.column_stack([1.0 - s, s])
        w = np.array([5.0, 8.0, 5.0]) / 18.0
        return lam, w
    r = np.sqrt(15.0)
    a1, b1 = (9.0 - 2.0 * r) / 21.0, (6.0 + r) / 21.0
    a2, b2 = (9.0 + 2.0 * r) / 21.0, (6.0 - r) / 21.0
    w1, w2 = (155.0 + r) / 1200.0, (155.0 - r) / 1200.0
    lam = np.array(
        [
            [1 / 3, 1 / 3, 1 / 3],
            [a1, b1, b1], [b1, a1, b1], [b1, b1, a1],
            [a2, b2, b2], [b2, a2, b2], [b2, b2, a2],
        ]
    )
    w = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
    return lam, w


def _geometry(mesh):
    """Element measures and constant basis gradients, shape (ne, nloc, dim)."""
    X = mesh.coords[mesh.cells]
    if mesh.dim == 1:
        h = X[:, 1, 0] - X[:, 0, 0]
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        return np.abs(h), grads
    e1 = X[:, 1] - X[:, 0]
    e2 = X[:, 2] - X[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # rows of inv(J)^T give gradients of the two non-trivial barycentrics
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return 0.5 * np.abs(det), grads


def quadrature(mesh):
    """Return ``(points, weights, phi)`` for the element quadrature.

    ``points`` has shape (ne, nq, dim), ``weights`` (ne, nq) includes the
    element measure, and ``phi`` (nq, nloc) holds basis values.
    """
    lam, w = _reference_rule(mesh.dim)
    measure, _ = _geometry(mesh)
    X = mesh.coords[mesh.cells]
    points = np.einsum("qa,ead->eqd", lam, X)
    return points, measure[:, None] * w[None, :], lam


def evaluate_at_quadrature(mesh, u):
    """Values of the finite-element field ``u`` at quadrature points, (ne, nq)."""
    lam, _ = _reference_rule(mesh.dim)
    return u[mesh.cells] @ lam.T


def _assemble_matrix(mesh, local):
    rows = np.repeat(mesh.cells, mesh.dim + 1, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, mesh.dim + 1)).ravel()
    m = mesh.num_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(m, m)).tocsr()


def _assemble_vector(mesh, local):
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(),
                       minlength=mesh.num_nodes)


# ---------------------------------------------------------------------------
# operators

class SparseOperator:
    """A sparse matrix with apply/solve contracts and monotone counters.

    ``factorize`` caches a sparse LU factorization; ``solve`` and
    ``solve_transpose`` are only available afterwards. Counters are guarded
    by a lock so concurrent read-only use is safe.
    """

    def __init__(self, matrix, name=""):
        self.matrix = sp.csr_matrix(matrix, dtype=float)
        self.name = name
        self._lu = None
        self._lock = threading.Lock()
        self.n_apply = 0
        self.n_apply_transpose = 0
        self.n_solve = 0
        self.n_solve_transpose = 0

    def __repr__(self):
        return f"SparseOperator({self.name!r}, shape={self.shape}, nnz={self.matrix.nnz})"

    @property
    def shape(self):
        return self.matrix.shape

    def _bump(self, attr):
        with self._lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"expected length {self.shape[1]}, got {x.shape[0]}")
        self._bump("n_apply")
        return self.matrix @ x

    def apply_transpose(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.shape[0]:
            raise ValueError(f"expected length {self.shape[0]}, got {y.shape[0]}")
        self._bump("n_apply_transpose")
        return self.matrix.T @ y

    def factorize(self):
        if self.shape[0] != self.shape[1]:
            raise ValueError("only square operators can be factorized")
        if self._lu is None:
            try:
                self._lu = splu(self.matrix.tocsc())
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(f"{self.name or 'operator'} is singular") from exc
        return self

    @property
    def factorized(self):
        return self._lu is not None

    def solve(self, b):
        if self._lu is None:
            raise RuntimeError("call factorize() before solve()")
        self._bump("n_solve")
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_transpose(self, b):
        if self._lu is None:
            raise RuntimeError("call factorize() before solve_transpose()")
        self._bump("n_solve_transpose")
        return self._lu.solve(np.asarray(b, dtype=float), trans="T")

    def toarray(self):
        return self.matrix.toarray()


@dataclass(frozen=True)
class BoundaryProjector:
    """Restriction ``P`` onto a set of boundary nodes (``P`` is m_b x m)."""

    indices: np.ndarray
    size: int

    def __post_init__(self):
        idx = self.indices
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise ValueError("projector index out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("projector indices must be distinct")

    def apply(self, x):
        return np.asarray(x)[self.indices]

    def apply_transpose(self, y):
        out = np.zeros(self.size)
        out[self.indices] = y
        return out

    def matrix(self):
        mb = self.indices.size
        return sp.csr_matrix((np.ones(mb), (np.arange(mb), self.indices)),
                             shape=(mb, self.size))


def boundary_projector(mesh, tag):
    return BoundaryProjector(mesh.nodes_with_tag(tag), mesh.num_nodes)


def assemble_mass(mesh):
    """Consistent mass matrix, entry (i, j) = int phi_i phi_j."""
    _, w, phi = quadrature(mesh)
    local = np.einsum("eq,qa,qb->eab", w, phi, phi)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return SparseOperator(_assemble_matrix(mesh, local), "mass")


def assemble_weighted_mass(mesh, values):
    """Entry (i, j) = int c phi_i phi_j with ``c`` given at quadrature points."""
    _, w, phi = quadrature(mesh)
    local = np.einsum("eq,qa,qb->eab", w * values, phi, phi)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return _assemble_matrix(mesh, local)


def assemble_load(mesh, values):
    """Vector with entries int f phi_i for ``f`` given at quadrature points."""
    _, w, phi = quadrature(mesh)
    return _assemble_vector(mesh, (w * values) @ phi)


def assemble_stiffness(mesh, coefficient=1.0):
    """Entry (i, j) = coefficient * int grad phi_i . grad phi_j."""
    if coefficient < 0:
        raise ValueError("stiffness coefficient must be nonnegative")
    measure, grads = _geometry(mesh)
    local = coefficient * measure[:, None, None] * np.einsum("ead,ebd->eab", grads, grads)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return SparseOperator(_assemble_matrix(mesh, local), "stiffness")


def assemble_advection(mesh, velocity):
    """Entry (i, j) = int (v . grad phi_j) phi_i.

    ``velocity`` maps an array of points (..., dim) to velocities of the same
    shape; a constant vector or scalar (1D) is also accepted.
    """
    points, w, phi = quadrature(mesh)
    if callable(velocity):
        v = np.asarray(velocity(points), dtype=float)
    else:
        v = np.broadcast_to(np.asarray(velocity, dtype=float), points.shape)
    v = v.reshape(points.shape)
    _, grads = _geometry(mesh)
    vg = np.einsum("eqd,ebd->eqb", v, grads)
    local = np.einsum("eq,qa,eqb->eab", w, phi, vg)
    return SparseOperator(_assemble_matrix(mesh, local), "advection")
