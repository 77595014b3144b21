"""Snapshot POD, interpolatory nodal bases and the Galerkin reduced model.

All POD quantities live on the interior degrees of freedom of the mesh.
The nodal basis ``Psi`` is a change of basis of the leading POD modes such
that ``Psi[dof(x_l), k] = delta_kl``; reduced coefficients are therefore
the solution values at the observation nodes.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as la

from .errors import ConditioningError, MeshError, RankError

log = logging.getLogger(__name__)

# eigenvalues of Phi^T Phi carry absolute error ~eps sigma_1^2, so singular
# values below ~sqrt(eps) sigma_1 cannot be told apart from zero
RANK_TOL = 1e-7
MAX_CONDITION = 1e8
BUNDLE_VERSION = 1

DEFAULT_POINTS = ((0.5, 0.5), (0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


@dataclass(eq=False)
class SnapshotMatrix:
    data: np.ndarray           # (n_dofs, N)
    run_ids: np.ndarray        # (N,)
    time_index: np.ndarray     # (N,)

    @property
    def n_snapshots(self):
        return self.data.shape[1]


def collect_snapshots(runs, run_ids=None):
    """Stack trajectories into a snapshot matrix, run-major then time-major.

    Each run is an array of shape ``(n_states, n_dofs)``.
    """
    runs = [np.atleast_2d(np.asarray(r, dtype=float)) for r in runs]
    if not runs:
        raise ValueError("no runs given")
    dim = runs[0].shape[1]
    for i, r in enumerate(runs):
        if r.shape[1] != dim:
            raise MeshError(f"run {i} has dimension {r.shape[1]}, expected {dim}")
    if run_ids is None:
        run_ids = range(len(runs))
    run_ids = list(run_ids)
    data = np.concatenate(runs, axis=0).T
    rid = np.concatenate([np.full(len(r), k) for r, k in zip(runs, run_ids)])
    tix = np.concatenate([np.arange(len(r)) for r in runs])
    return SnapshotMatrix(data, rid, tix)


@dataclass(eq=False)
class PodBasis:
    modes: np.ndarray              # (n_dofs, m), unit Euclidean columns
    singular_values: np.ndarray    # (m,)
    eigenvectors: np.ndarray       # (N, m)
    spectrum: np.ndarray = field(repr=False)   # all singular values, descending

    @property
    def n_modes(self):
        return self.modes.shape[1]


def compute_pod(snapshots, m):
    """Leading ``m`` POD modes from the eigendecomposition of ``Phi^T Phi``."""
    Phi = getattr(snapshots, "data", snapshots)
    Phi = np.asarray(Phi, dtype=float)
    N = Phi.shape[1]
    if not 1 <= m <= N:
        raise RankError(f"need 1 <= m <= N={N}, got m={m}")
    C = Phi.T @ Phi
    lam, W = la.eigh(C)
    order = np.argsort(lam)[::-1]
    lam, W = lam[order], W[:, order]
    sigma = np.sqrt(np.clip(lam, 0.0, None))
    if sigma[0] == 0 or sigma[m - 1] / sigma[0] < RANK_TOL:
        rank = int(np.sum(sigma > RANK_TOL * sigma[0])) if sigma[0] > 0 else 0
        raise RankError(f"snapshots have numerical rank {rank} < m={m}; use fewer modes")
    modes = Phi @ W[:, :m] / sigma[:m]
    return PodBasis(modes, sigma[:m].copy(), W[:, :m].copy(), sigma)


def projection_residual(Phi, modes):
    """``||Phi - P Phi||_F^2`` for orthogonal projection onto span(modes)."""
    Q, _ = np.linalg.qr(modes)
    R = Phi - Q @ (Q.T @ Phi)
    return float(np.sum(R * R))


def _lattice_points(m):
    s = int(np.ceil(np.sqrt(m)))
    ticks = (np.arange(s) + 1) / (s + 1)
    pts = [(x, y) for y in ticks for x in ticks]
    return pts[:m]


def select_observation_nodes(mesh, requested=5):
    """Snap observation points to their nearest interior mesh nodes.

    ``requested`` is either a count or a sequence of ``(x, y)`` points. A
    count of 5 gives the center plus the four quarter points; other counts
    use a uniform interior lattice.
    """
    if np.ndim(requested) == 0:
        m = int(requested)
        if m < 1:
            raise ValueError("need at least one observation node")
        points = DEFAULT_POINTS if m == 5 else (((0.5, 0.5),) if m == 1 else _lattice_points(m))
    else:
        points = [tuple(p) for p in requested]
    nodes = []
    for x, y in points:
        if not (0 <= x <= 1 and 0 <= y <= 1):
            raise MeshError(f"point ({x}, {y}) lies outside the domain")
        i, j = int(round(x * mesh.nx)), int(round(y * mesh.ny))
        node = mesh.node_at(i, j)
        if mesh.boundary_mask[node]:
            raise MeshError(f"point ({x}, {y}) snaps to boundary node {node}; values there are pinned to 0")
        if node in nodes:
            raise MeshError(f"point ({x}, {y}) snaps to node {node}, already selected")
        nodes.append(node)
    return np.array(nodes)


@dataclass(eq=False)
class NodalBasis:
    """Interpolatory basis built from POD modes.

    ``coefficients[k, j]`` is the weight of mode ``j`` in ``psi_k``.
    """

    nodes: np.ndarray          # mesh node indices of the observation points
    dofs: np.ndarray           # interior DOF indices of the same points
    coefficients: np.ndarray   # (m, m)
    psi: np.ndarray            # (n_dofs, m)
    singular_values: np.ndarray = None
    mesh_shape: tuple = None

    @property
    def m(self):
        return self.psi.shape[1]

    def node_values(self, u_int):
        return np.asarray(u_int)[..., self.dofs]


def build_nodal_basis(pod, nodes, mesh=None, dofs=None):
    """Rotate the POD modes into an interpolatory basis at ``nodes``.

    ``dofs`` maps nodes to rows of the mode matrix; it is taken from
    ``mesh`` when not given directly.
    """
    modes = getattr(pod, "modes", pod)
    nodes = np.asarray(nodes)
    if dofs is None:
        if mesh is None:
            raise ValueError("need a mesh or explicit dof indices")
        dofs = mesh.dof_index[nodes]
        if np.any(dofs < 0):
            raise MeshError("observation nodes must be interior nodes")
    dofs = np.asarray(dofs)
    m = modes.shape[1]
    if dofs.size != m:
        raise RankError(f"{dofs.size} nodes for {m} modes; the interpolation system must be square")
    Xi = modes[dofs, :]                      # Xi[k, j] = xi_j(x_k)
    cond = np.linalg.cond(Xi)
    if not cond <= MAX_CONDITION:
        raise ConditioningError(
            f"mode values at the nodes are ill-conditioned (cond={cond:.3e}); "
            "choose different nodes or fewer modes")
    Xi_inv = np.linalg.inv(Xi)
    psi = modes @ Xi_inv
    shape = (mesh.nx, mesh.ny) if mesh is not None else None
    return NodalBasis(nodes, dofs, Xi_inv.T, psi,
                      getattr(pod, "singular_values", None), shape)


def identity_basis(mesh):
    """Degenerate basis with one function per interior DOF."""
    n = mesh.n_dofs
    return NodalBasis(mesh.interior.copy(), np.arange(n), np.eye(n), np.eye(n),
                      None, (mesh.nx, mesh.ny))


def reconstruct(basis, c):
    """Interior field ``Psi c`` (also accepts a stack of coefficient rows)."""
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != basis.m:
        raise ValueError(f"expected {basis.m} coefficients, got {c.shape[-1]}")
    return c @ basis.psi.T


def project_system(basis, M, A, b):
    """Galerkin triple ``(Psi^T M Psi, Psi^T A Psi, Psi^T b)``."""
    psi = basis.psi if hasattr(basis, "psi") else np.asarray(basis)
    Mr = psi.T @ (M @ psi)
    Ar = psi.T @ (A @ psi)
    br = psi.T @ b
    try:
        la.cho_factor(Mr)
    except la.LinAlgError as exc:
        raise RankError("reduced mass matrix is not positive definite; basis is rank deficient") from exc
    return np.asarray(Mr), np.asarray(Ar), np.asarray(br)


class ReducedSystem:
    """Galerkin reduced model of a :class:`~podnet.fem.DiffusionProblem`.

    The stiffness matrix is reassembled every step on the reconstructed
    field and projected; there is no hyper-reduction.
    """

    def __init__(self, basis, problem):
        if problem.mesh.n_dofs != basis.psi.shape[0]:
            raise MeshError("basis and problem live on different meshes")
        self.basis = basis
        self.problem = problem
        self.trajectory = []

    @cached_property
    def mass(self):
        psi = self.basis.psi
        return np.asarray(psi.T @ (self.problem.mass @ psi))

    def step(self, c_n, t_next):
        c_n = np.asarray(c_n, dtype=float)
        if not np.all(np.isfinite(c_n)):
            raise ValueError("reduced state is not finite")
        mesh, psi, dt = self.problem.mesh, self.basis.psi, self.problem.dt
        u_n = mesh.to_full(reconstruct(self.basis, c_n))
        A = self.problem.stiffness(u_n)
        b = self.problem.load(t_next)
        Mr = self.mass
        Ar = np.asarray(psi.T @ (A @ psi))
        br = psi.T @ b
        lhs = Mr + dt * Ar
        rhs = Mr @ c_n + dt * br
        try:
            return la.solve(lhs, rhs, assume_a="pos")
        except la.LinAlgError as exc:
            raise la.LinAlgError(f"reduced solve failed at t={t_next:g}: {exc}") from exc

    def run(self, c0):
        c = np.asarray(c0, dtype=float)
        self.trajectory = [c]
        for t in self.problem.times()[1:]:
            c = self.step(c, t)
            self.trajectory.append(c)
        return np.array(self.trajectory)


def step_rom(basis, problem, c_n, t_next, system=None):
    """One reduced implicit-Euler step; see :class:`ReducedSystem`."""
    if system is None:
        system = ReducedSystem(basis, problem)
    return system.step(c_n, t_next)


# -- persistence -----------------------------------------------------------

def save_basis(basis, path):
    """Write a nodal basis bundle (text).

    Layout: a header line ``PODNET-BASIS <version>``, one JSON line with the
    mesh descriptor, node indices, DOF indices and singular values, then the
    ``coefficients`` and ``psi`` matrices as CSV blocks (column-major: one
    line per column), each preceded by a ``# name rows cols`` line.
    """
    meta = {
        "mesh": {"nx": basis.mesh_shape[0], "ny": basis.mesh_shape[1]} if basis.mesh_shape else None,
        "nodes": [int(n) for n in basis.nodes],
        "dofs": [int(d) for d in basis.dofs],
        "singular_values": None if basis.singular_values is None
        else [float(s) for s in basis.singular_values],
    }
    buf = io.StringIO()
    buf.write(f"PODNET-BASIS {BUNDLE_VERSION}\n")
    buf.write(json.dumps(meta, sort_keys=True) + "\n")
    for name, mat in (("coefficients", basis.coefficients), ("psi", basis.psi)):
        buf.write(f"# {name} {mat.shape[0]} {mat.shape[1]}\n")
        np.savetxt(buf, mat.T, delimiter=",", fmt="%.17g")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_basis(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[:1] != ["PODNET-BASIS"] or int(header[1]) != BUNDLE_VERSION:
            raise ValueError(f"{path}: not a version-{BUNDLE_VERSION} basis bundle")
        meta = json.loads(fh.readline())
        mats = {}
        for _ in range(2):
            _, name, rows, cols = fh.readline().split()
            rows, cols = int(rows), int(cols)
            block = [fh.readline() for _ in range(cols)]
            mats[name] = np.loadtxt(block, delimiter=",", ndmin=2).reshape(cols, rows).T
    mesh = meta["mesh"]
    sv = meta["singular_values"]
    return NodalBasis(np.array(meta["nodes"]), np.array(meta["dofs"]),
                      mats["coefficients"], mats["psi"],
                      None if sv is None else np.array(sv),
                      (mesh["nx"], mesh["ny"]) if mesh else None)
