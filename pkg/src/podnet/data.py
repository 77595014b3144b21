"""Simulation and observation trajectories, input encodings and datasets.

Simulation data come from the POD reduced model, observation data from
the fine finite-element solver sampled at the observation nodes. Sources
are wells: Gaussian bumps at the observation nodes whose rates may change
from step to step.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import DatasetError
from .network import OBSERVATION, SIMULATION, Dataset
from .pod import ReducedSystem, reconstruct

WELL_WIDTH = 0.05


class WellSource:
    """``g(x, t) = sum_k q_k(t) G_k(x)`` with unit-mass Gaussians ``G_k``.

    ``rates`` has one row per time level ``n`` (``t = n dt``).
    """

    def __init__(self, centers, rates, dt, width=WELL_WIDTH):
        self.centers = np.asarray(centers, float)
        self.rates = np.atleast_2d(np.asarray(rates, float))
        self.dt = float(dt)
        self.width = float(width)
        if self.rates.shape[1] != len(self.centers):
            raise ValueError("one rate column per well required")

    def rates_at(self, t):
        n = int(round(t / self.dt))
        if not 0 <= n < len(self.rates):
            raise ValueError(f"time {t} outside the rate schedule")
        return self.rates[n]

    def __call__(self, x, y, t):
        q = self.rates_at(t)
        norm = 1.0 / (2 * np.pi * self.width ** 2)
        out = np.zeros(np.broadcast(x, y).shape)
        for (cx, cy), qk in zip(self.centers, q):
            if qk != 0:
                out += qk * norm * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * self.width ** 2))
        return out


def constant_rates(n_steps, n_wells, rate=1.0):
    return np.full((n_steps + 1, n_wells), float(rate))


def sinusoidal_rates(n_steps, n_wells, seed, rate=1.0, variation=0.5, amplitude_range=None):
    """Rates ``a_k (1 + variation sin(2 pi n / n_steps + phi_k))``.

    Phases are drawn from ``seed``; ``amplitude_range`` additionally draws a
    per-well rate ``a_k`` uniformly, otherwise ``a_k = rate``.
    """
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, n_wells)
    amp = (np.full(n_wells, rate) if amplitude_range is None
           else rate * rng.uniform(*amplitude_range, n_wells))
    n = np.arange(n_steps + 1)[:, None]
    return amp * (1 + variation * np.sin(2 * np.pi * n / n_steps + phases))


# -- inputs ----------------------------------------------------------------

@dataclass(frozen=True)
class InputEncoding:
    """Which parameters enter the network input next to the state."""

    include_kappa: bool = False
    include_source: bool = False
    lattice: int = 8

    def kappa_features(self, perm):
        """``log10 kappa`` averaged over a ``lattice`` by ``lattice`` block grid."""
        grid = np.log10(np.asarray(perm.values, float)).reshape(perm.ny, perm.nx)
        p = self.lattice
        bi = (np.arange(perm.ny) * p) // perm.ny
        bj = (np.arange(perm.nx) * p) // perm.nx
        sums = np.zeros((p, p))
        counts = np.zeros((p, p))
        np.add.at(sums, (bi[:, None], bj[None, :]), grid)
        np.add.at(counts, (bi[:, None], bj[None, :]), 1)
        return (sums / counts).ravel()

    def dim(self, n_wells):
        return (self.lattice ** 2 if self.include_kappa else 0) + (n_wells if self.include_source else 0)

    def encode(self, realization):
        """Rows ``I^1 .. I^k`` for one realization, shape ``(k, dim)``."""
        k = realization.n_steps
        parts = []
        if self.include_kappa:
            perm = realization.input_perm if realization.input_perm is not None else realization.perm
            parts.append(np.tile(self.kappa_features(perm), (k, 1)))
        if self.include_source:
            parts.append(np.asarray(realization.rates, float)[1:k + 1])
        if not parts:
            return np.zeros((k, 0))
        return np.hstack(parts)

    def to_json(self):
        return {"include_kappa": self.include_kappa, "include_source": self.include_source,
                "lattice": self.lattice}


# -- realizations ----------------------------------------------------------

@dataclass(eq=False)
class SampleRealization:
    run_id: int
    c0: np.ndarray
    perm: object
    rates: np.ndarray
    trajectory: np.ndarray           # (k + 1, m)
    provenance: str
    group: int = 0                   # permeability configuration index
    companion: np.ndarray = None     # simulated trajectory paired with an observation
    input_perm: object = None        # field shown to the network, if not ``perm``

    @property
    def n_steps(self):
        return self.trajectory.shape[0] - 1


@dataclass(eq=False)
class FlowSetup:
    """Mesh, physics constants and the nodal basis shared by all runs."""

    mesh: fem.StructuredMesh
    alpha: float
    dt: float
    n_steps: int
    centers: np.ndarray
    basis: object = None
    well_width: float = WELL_WIDTH

    def problem(self, perm, rates, u0=None):
        src = WellSource(self.centers, rates, self.dt, self.well_width)
        return fem.DiffusionProblem(self.mesh, perm, self.alpha, src, self.dt, self.n_steps, u0)


def sample_initial_conditions(count, seed, m=5, low=0.0, high=1.0):
    """``count`` coefficient vectors drawn i.i.d. uniform on ``[low, high]``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(count, m))


def bump_initial_field(setup, c, radius=0.1):
    """Fine initial field ``sum_k c_k exp(-|x - x_k|^2 / 2 r^2)`` with zero boundary.

    Used for the snapshot runs that precede the nodal basis.
    """
    xy = setup.mesh.coords
    u = np.zeros(setup.mesh.n_nodes)
    for (cx, cy), ck in zip(setup.centers, c):
        u += ck * np.exp(-((xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2) / (2 * radius ** 2))
    u[setup.mesh.boundary_mask] = 0.0
    return u


def snapshot_run(setup, c0, perm, rates):
    """Fine interior trajectory started from a bump field, for POD."""
    prob = setup.problem(perm, rates, bump_initial_field(setup, c0))
    return setup.mesh.to_interior(fem.run_fine(prob))


def generate_simulation_realization(c0, perm, rates, setup, run_id=0, group=0):
    """Reduced-model trajectory of the nodal coefficients."""
    prob = setup.problem(perm, rates)
    traj = ReducedSystem(setup.basis, prob).run(c0)
    return SampleRealization(run_id, np.asarray(c0, float), perm, np.asarray(rates, float),
                             traj, SIMULATION, group)


def generate_observation_realization(c0, perm, rates, setup, run_id=0, group=0, companion=None):
    """Fine trajectory from ``Psi c0`` sampled at the observation nodes."""
    mesh = setup.mesh
    u0 = mesh.to_full(reconstruct(setup.basis, c0))
    traj_full = fem.run_fine(setup.problem(perm, rates, u0))
    traj = setup.basis.node_values(mesh.to_interior(traj_full))
    comp = None if companion is None else getattr(companion, "trajectory", companion)
    return SampleRealization(run_id, np.asarray(c0, float), perm, np.asarray(rates, float),
                             traj, OBSERVATION, group, comp)


# -- datasets --------------------------------------------------------------

def _pairs(real, encoding, input_source):
    traj = real.trajectory
    if real.provenance == OBSERVATION and input_source == "simulation":
        if real.companion is None:
            raise DatasetError(f"observation run {real.run_id} has no simulated companion")
        states = real.companion
    else:
        states = traj
    inputs = encoding.encode(real)
    X = np.hstack([states[:-1], inputs])
    Y = traj[1:]
    return X, Y


def assemble_dataset(realizations, mode, encoding=InputEncoding(), input_source="simulation"):
    """Training pairs for network A, B or C.

    * ``"A"`` observation outputs only,
    * ``"B"`` simulation and observation outputs, tagged,
    * ``"C"`` simulation outputs only.

    Inputs are the simulated states ``c_s^n`` (``input_source="simulation"``)
    followed by the encoded parameters ``I^{n+1}``; with
    ``input_source="observation"`` observation pairs use their own states.
    """
    mode = mode.upper()
    if mode not in "ABC" or len(mode) != 1:
        raise DatasetError(f"unknown dataset mode {mode!r}")
    provs = {r.provenance for r in realizations}
    if not realizations:
        raise DatasetError("no realizations")
    if mode == "A" and provs != {OBSERVATION}:
        raise DatasetError("mode A needs observation realizations only")
    if mode == "C" and provs != {SIMULATION}:
        raise DatasetError("mode C needs simulation realizations only")
    if mode == "B" and provs != {OBSERVATION, SIMULATION}:
        raise DatasetError("mode B needs both simulation and observation realizations")
    Xs, Ys, tags, rids, steps = [], [], [], [], []
    for r in realizations:
        X, Y = _pairs(r, encoding, input_source)
        Xs.append(X)
        Ys.append(Y)
        tags += [r.provenance] * len(X)
        rids.append(np.full(len(X), r.run_id))
        steps.append(np.arange(len(X)))
    return Dataset(np.vstack(Xs), np.vstack(Ys), np.array(tags, dtype=object),
                   np.concatenate(rids), np.concatenate(steps))


def split(realizations, train_count, seed, stratify=False):
    """Split at realization granularity.

    With ``stratify`` the held-out realizations are spread evenly over the
    permeability groups.
    """
    n = len(realizations)
    if not 0 < train_count < n:
        raise ValueError(f"train_count must satisfy 0 < train_count < {n}, got {train_count}")
    rng = np.random.default_rng(seed)
    n_test = n - train_count
    if stratify:
        groups = sorted({r.group for r in realizations})
        by_group = {g: [i for i, r in enumerate(realizations) if r.group == g] for g in groups}
        test = []
        gi = 0
        order = rng.permutation(len(groups))
        while len(test) < n_test:
            g = groups[order[gi % len(groups)]]
            free = [i for i in by_group[g] if i not in test]
            if free:
                test.append(free[rng.integers(len(free))])
            gi += 1
        test = set(test)
    else:
        test = set(rng.permutation(n)[:n_test].tolist())
    train = [r for i, r in enumerate(realizations) if i not in test]
    held = [r for i, r in enumerate(realizations) if i in test]
    return train, held


def holdout_group(realizations, group):
    """All realizations of one permeability configuration form the test set."""
    train = [r for r in realizations if r.group != group]
    test = [r for r in realizations if r.group == group]
    if not test or not train:
        raise ValueError(f"group {group} does not split the realizations")
    return train, test


def save_dataset(dataset, csv_path, manifest):
    """One pair per row: provenance, run id, step, inputs, targets; JSON manifest next to it."""
    dx, dy = dataset.X.shape[1], dataset.Y.shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["provenance", "run_id", "step"] + [f"x{i}" for i in range(dx)]
                   + [f"y{i}" for i in range(dy)])
        for j in range(len(dataset)):
            w.writerow([dataset.provenance[j], int(dataset.run_id[j]), int(dataset.step[j])]
                       + [repr(float(v)) for v in dataset.X[j]]
                       + [repr(float(v)) for v in dataset.Y[j]])
    manifest = dict(manifest, n_pairs=len(dataset), x_dim=dx, y_dim=dy)
    with open(str(csv_path).rsplit(".", 1)[0] + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path):
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    dx = sum(h.startswith("x") for h in head)
    prov = np.array([r[0] for r in body], dtype=object)
    rid = np.array([int(r[1]) for r in body])
    step = np.array([int(r[2]) for r in body])
    vals = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), -1)
    return Dataset(vals[:, :dx], vals[:, dx:], prov, rid, step)
