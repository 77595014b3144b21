"""Q1 finite elements on a uniform rectangular grid of the unit square.

Nodes are numbered row-major, ``node = j * (nx + 1) + i`` for the node at
``(i / nx, j / ny)``; element ``e = j * nx + i`` has the counterclockwise
corners ``(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)``.

Homogeneous Dirichlet conditions are imposed by eliminating boundary nodes,
so the matrices returned by default act on the interior degrees of freedom.
Nodal vectors passed between functions are full-length (one value per
node) with zeros on the boundary unless stated otherwise.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshError, NumericalRangeError, SolverError

log = logging.getLogger(__name__)

EXP_CLAMP = 50.0
CG_RTOL = 1e-10
BACKWARD_TOL = 1e-12

_clamp_warned = False

# 2x2 Gauss rule on the reference square [0, 1]^2
_G = 0.5 / np.sqrt(3.0)
QUAD_POINTS = np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G],
                        [0.5 + _G, 0.5 + _G], [0.5 - _G, 0.5 + _G]])
QUAD_WEIGHTS = np.full(4, 0.25)


def shape_values(xi, eta):
    """Bilinear shape functions at reference points, shape ``(..., 4)``."""
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta),
                     xi * eta, (1 - xi) * eta], axis=-1)


def shape_gradients(xi, eta):
    """Reference gradients, shape ``(..., 4, 2)`` as (d/dxi, d/deta)."""
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    dxi = np.stack([-(1 - eta), 1 - eta, eta, -eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, xi, 1 - xi], axis=-1)
    return np.stack([dxi, deta], axis=-1)


_N_Q = shape_values(QUAD_POINTS[:, 0], QUAD_POINTS[:, 1])      # (4q, 4a)
_DN_Q = shape_gradients(QUAD_POINTS[:, 0], QUAD_POINTS[:, 1])  # (4q, 4a, 2)


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    """Uniform ``nx`` by ``ny`` partition of the unit square."""

    nx: int
    ny: int
    coords: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    boundary_mask: np.ndarray = field(repr=False)
    interior: np.ndarray = field(repr=False)
    dof_index: np.ndarray = field(repr=False)

    @property
    def h(self):
        return 1.0 / self.nx, 1.0 / self.ny

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self):
        return self.nx * self.ny

    @property
    def n_dofs(self):
        return self.interior.size

    @cached_property
    def element_centers(self):
        return self.coords[self.elements].mean(axis=1)

    @cached_property
    def quadrature_points(self):
        """Physical quadrature points, shape ``(n_elements, 4, 2)``."""
        hx, hy = self.h
        origin = self.coords[self.elements[:, 0]]
        return origin[:, None, :] + QUAD_POINTS[None, :, :] * np.array([hx, hy])

    @cached_property
    def _pattern(self):
        rows = np.repeat(self.elements, 4, axis=1).ravel()
        cols = np.tile(self.elements, (1, 4)).ravel()
        return rows, cols

    def node_at(self, i, j):
        return j * (self.nx + 1) + i

    def to_interior(self, u):
        """Restrict a full nodal vector (or stack of them) to interior DOFs."""
        return np.asarray(u)[..., self.interior]

    def to_full(self, u_int):
        """Extend interior values with zeros on the boundary."""
        u_int = np.asarray(u_int, dtype=float)
        out = np.zeros(u_int.shape[:-1] + (self.n_nodes,))
        out[..., self.interior] = u_int
        return out

    def descriptor(self):
        return {"nx": self.nx, "ny": self.ny}


def build_mesh(nx, ny):
    """Build the structured Q1 mesh with ``nx`` by ``ny`` elements."""
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise MeshError(f"need nx, ny >= 2 for an interior node, got ({nx}, {ny})")
    nx, ny = int(nx), int(ny)
    x = np.arange(nx + 1) / nx
    y = np.arange(ny + 1) / ny
    X, Y = np.meshgrid(x, y)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (J * (nx + 1) + I).ravel()
    elements = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])

    ii = np.tile(np.arange(nx + 1), ny + 1)
    jj = np.repeat(np.arange(ny + 1), nx + 1)
    boundary = (ii == 0) | (ii == nx) | (jj == 0) | (jj == ny)
    interior = np.flatnonzero(~boundary)
    dof_index = np.full(coords.shape[0], -1)
    dof_index[interior] = np.arange(interior.size)
    for arr in (coords, elements, boundary, interior, dof_index):
        arr.setflags(write=False)
    return StructuredMesh(nx, ny, coords, elements, boundary, interior, dof_index)


# -- local matrices --------------------------------------------------------

def local_mass(hx=1.0, hy=1.0):
    """Element mass matrix of a ``hx`` by ``hy`` rectangle."""
    w = QUAD_WEIGHTS * hx * hy
    return np.einsum("q,qa,qb->ab", w, _N_Q, _N_Q)


def _physical_grad_products(hx, hy):
    # (q, a, b) entries of grad N_a . grad N_b at each quadrature point
    scale = np.array([1.0 / hx, 1.0 / hy])
    g = _DN_Q * scale
    return np.einsum("qai,qbi->qab", g, g)


def local_stiffness(hx=1.0, hy=1.0, coef=1.0):
    """Element stiffness matrix; ``coef`` is a scalar or 4 quadrature values."""
    coef = np.broadcast_to(np.asarray(coef, float), (4,))
    w = QUAD_WEIGHTS * hx * hy * coef
    return np.einsum("q,qab->ab", w, _physical_grad_products(hx, hy))


# -- global assembly -------------------------------------------------------

def _element_values(kappa):
    return np.asarray(getattr(kappa, "values", kappa), dtype=float)


def _assemble(mesh, local, eliminate):
    rows, cols = mesh._pattern
    n = mesh.n_nodes
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if eliminate:
        idx = mesh.interior
        mat = mat[idx][:, idx]
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_mass(mesh, eliminate=True):
    """Global mass matrix ``M_ij = int v_i v_j``.

    With ``eliminate=False`` the full node-by-node matrix is returned.
    """
    hx, hy = mesh.h
    local = np.broadcast_to(local_mass(hx, hy), (mesh.n_elements, 4, 4))
    return _assemble(mesh, local, eliminate)


def diffusion_coefficient(mesh, kappa, u_prev, alpha):
    """``kappa * exp(alpha * u_prev)`` at the quadrature points, ``(n_el, 4)``."""
    kvals = _element_values(kappa)
    if kvals.shape != (mesh.n_elements,):
        raise MeshError(f"kappa has {kvals.size} values, mesh has {mesh.n_elements} elements")
    u_prev = np.asarray(u_prev, dtype=float)
    if u_prev.shape != (mesh.n_nodes,):
        raise MeshError(f"u_prev must have length {mesh.n_nodes}, got {u_prev.shape}")
    if not (np.all(np.isfinite(u_prev)) and np.all(np.isfinite(kvals))):
        raise NumericalRangeError("non-finite state or permeability in stiffness assembly")
    u_q = u_prev[mesh.elements] @ _N_Q.T
    arg = alpha * u_q
    if np.any(np.abs(arg) > EXP_CLAMP):
        global _clamp_warned
        emit = log.debug if _clamp_warned else log.warning
        _clamp_warned = True
        emit("exp(alpha*u) argument clamped to [-%g, %g] (max |arg| = %.3g)",
                    EXP_CLAMP, EXP_CLAMP, np.abs(arg).max())
        arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
    coef = kvals[:, None] * np.exp(arg)
    if not np.all(np.isfinite(coef)):
        raise NumericalRangeError("diffusion coefficient overflowed")
    return coef


def assemble_stiffness(mesh, kappa, u_prev, alpha, eliminate=True):
    """Stiffness matrix with the lagged coefficient ``kappa exp(alpha u_prev)``."""
    coef = diffusion_coefficient(mesh, kappa, u_prev, alpha)
    hx, hy = mesh.h
    weights = coef * (QUAD_WEIGHTS * hx * hy)
    local = np.einsum("eq,qab->eab", weights, _physical_grad_products(hx, hy))
    return _assemble(mesh, local, eliminate)


def assemble_load(mesh, source, t, eliminate=True):
    """Load vector ``b_i = int g(., t) v_i`` by 2x2 Gauss quadrature.

    ``source`` is called as ``source(x, y, t)`` with arrays of quadrature
    coordinates, or is ``None`` for a zero source.
    """
    n = mesh.n_nodes
    if source is None:
        b = np.zeros(n)
    else:
        qp = mesh.quadrature_points
        g = np.broadcast_to(np.asarray(source(qp[..., 0], qp[..., 1], t), float),
                            qp.shape[:2])
        hx, hy = mesh.h
        local = (g * (QUAD_WEIGHTS * hx * hy)) @ _N_Q
        b = np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=n)
    return b[mesh.interior] if eliminate else b


# -- linear solver ---------------------------------------------------------

def solve_linear(A, rhs, rtol=CG_RTOL, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients for an SPD system.

    Stops once ``||A x - rhs|| <= rtol * ||rhs||``; the iteration cap
    defaults to ten times the system size.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    if maxiter is None:
        maxiter = 10 * n
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n)
    diag = A.diagonal() if sp.issparse(A) else np.diag(A)
    if np.any(diag <= 0):
        raise SolverError("matrix has a non-positive diagonal; not SPD")
    inv_diag = 1.0 / diag

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = rhs - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    tol = rtol * bnorm
    rnorm = np.linalg.norm(r)
    it = 0
    while rnorm > tol:
        if it >= maxiter:
            raise SolverError(
                f"CG did not converge in {maxiter} iterations "
                f"(relative residual {rnorm / bnorm:.3e})",
                residual=rnorm / bnorm, iterations=it)
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0:
            raise SolverError(f"CG breakdown at iteration {it}: p'Ap = {pAp:.3e}",
                              residual=rnorm / bnorm, iterations=it)
        step = rz / pAp
        x += step * p
        r -= step * Ap
        it += 1
        # recompute the true residual now and then to avoid drift
        if it % 50 == 0:
            r = rhs - A @ x
        rnorm = np.linalg.norm(r)
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = np.linalg.norm(rhs - A @ x)
    if true_res > tol:
        # recursive residual converged but the true one did not; polish
        if maxiter - it <= 0:
            raise SolverError("CG stagnated above tolerance",
                              residual=true_res / bnorm, iterations=it)
        return solve_linear(A, rhs, rtol, maxiter - it, x0=x)
    return x


def solve_direct(A, rhs, rtol=CG_RTOL):
    """Sparse LU solve with one step of iterative refinement.

    High-contrast coefficients put the residual floor of any
    floating-point solve above ``rtol * ||rhs||``; the result is accepted
    when either the relative residual meets ``rtol`` or the normwise
    backward error ``||r|| / (||A|| ||x|| + ||rhs||)`` is below
    ``BACKWARD_TOL``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if not np.any(rhs):
        return np.zeros(rhs.size)
    try:
        lu = spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    x = lu.solve(rhs)
    r = rhs - A @ x
    x += lu.solve(r)
    r = rhs - A @ x
    rnorm, bnorm = np.linalg.norm(r, np.inf), np.linalg.norm(rhs, np.inf)
    backward = rnorm / (spla.norm(A, np.inf) * np.linalg.norm(x, np.inf) + bnorm)
    if not np.all(np.isfinite(x)) or (rnorm > rtol * bnorm and backward > BACKWARD_TOL):
        raise SolverError(f"direct solve inaccurate: relative residual {rnorm / bnorm:.3e}, "
                          f"backward error {backward:.3e}", residual=rnorm / bnorm)
    return x


SOLVERS = {"direct": solve_direct, "cg": solve_linear}


# -- time stepping ---------------------------------------------------------

@dataclass(eq=False)
class DiffusionProblem:
    """Implicit-Euler discretization of ``u_t - div(kappa exp(alpha u) grad u) = g``."""

    mesh: StructuredMesh
    kappa: object
    alpha: float
    source: object
    dt: float
    n_steps: int
    u0: np.ndarray = None
    solver: str = "direct"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.u0 is None:
            self.u0 = np.zeros(self.mesh.n_nodes)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.u0.shape != (self.mesh.n_nodes,):
            raise MeshError("u0 must be a full nodal vector")
        if np.any(self.u0[self.mesh.boundary_mask] != 0):
            raise ValueError("u0 must vanish on the boundary")

    @cached_property
    def mass(self):
        return assemble_mass(self.mesh)

    def times(self):
        return self.dt * np.arange(self.n_steps + 1)

    def load(self, t):
        return assemble_load(self.mesh, self.source, t)

    def stiffness(self, u_prev):
        return assemble_stiffness(self.mesh, self.kappa, u_prev, self.alpha)


def step_fine(problem, u_n, t_next):
    """One implicit-Euler step with the coefficient lagged at ``u_n``.

    Solves ``(M + dt A) u = M u_n + dt b`` on the interior DOFs and returns
    the full nodal vector with zero boundary values.
    """
    mesh = problem.mesh
    u_n = np.asarray(u_n, dtype=float)
    if np.any(u_n[mesh.boundary_mask] != 0):
        raise ValueError("u_n violates the Dirichlet condition")
    M = problem.mass
    A = problem.stiffness(u_n)
    rhs = M @ u_n[mesh.interior] + problem.dt * problem.load(t_next)
    try:
        u_int = SOLVERS[problem.solver](M + problem.dt * A, rhs)
    except SolverError as exc:
        raise SolverError(f"fine step to t={t_next:g} failed: {exc}",
                          exc.residual, exc.iterations) from exc
    return mesh.to_full(u_int)


def run_fine(problem, u0=None):
    """Trajectory ``(n_steps + 1, n_nodes)`` starting from ``u0``."""
    u = problem.u0 if u0 is None else np.asarray(u0, dtype=float)
    traj = [u]
    for t in problem.times()[1:]:
        u = step_fine(problem, u, t)
        traj.append(u)
    return np.array(traj)


# -- metrics ---------------------------------------------------------------

def l2_error(mesh, M, u_ref, u_pred):
    """Absolute and percentage L2 error measured with the mass matrix.

    ``M`` may be the interior or the full mass matrix; full-length nodal
    vectors are restricted to match an interior ``M``.
    """
    u_ref = np.asarray(u_ref, dtype=float)
    u_pred = np.asarray(u_pred, dtype=float)
    if u_ref.shape != u_pred.shape:
        raise ValueError(f"shape mismatch {u_ref.shape} vs {u_pred.shape}")
    if u_ref.shape[-1] != M.shape[0]:
        u_ref, u_pred = mesh.to_interior(u_ref), mesh.to_interior(u_pred)
    e = u_ref - u_pred
    absolute = float(np.sqrt(max(e @ (M @ e), 0.0)))
    ref = float(np.sqrt(max(u_ref @ (M @ u_ref), 0.0)))
    if ref == 0.0:
        raise ZeroDivisionError("percentage error undefined for a zero reference")
    return absolute, 100.0 * absolute / ref
