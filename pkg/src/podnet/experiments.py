"""Configuration-driven reproduction of the four surrogate experiments.

Experiment 1  fixed field and source, input ``c^n``.
Experiment 2  ten field configurations, input ``(c^n, kappa)``; the
              ``holdout_configuration`` flag tests on an unseen field.
Experiment 3  as 2 with a shared time-dependent source, input
              ``(c^n, kappa, g^{n+1})``.
Experiment 4  observation data on a true field versus simulation data on
              a perturbed field, four training-set cases.
"""

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data, fem, network, permeability, pod
from .errors import StageError
from .network import OBSERVATION, SIMULATION, TrainingConfig

log = logging.getLogger(__name__)

DIVERGED_PCT = 1e3

_DEFAULT_SWEEPS = {
    1: ([3, 5, 10], [20, 100, 400]),
    2: ([2, 3, 4, 5, 10], [100]),
    3: ([2, 3, 4, 5, 10], [100]),
    4: ([5], [100]),
}

# fixed stream tags for seed derivation
_STREAMS = {"perm": 1, "ic": 2, "split": 3, "rates": 4, "perturb": 5, "train": 6}


def derive_seed(seed, stream, *extra):
    """Independent integer seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream], *[int(e) for e in extra]])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    experiment: int = 1
    nx: int = 32
    ny: int = 32
    alpha: float = 20.0
    dt: float = 0.1
    n_steps: int = 10
    n_modes: int = 5
    observation_points: list = field(default_factory=lambda: [list(p) for p in pod.DEFAULT_POINTS])
    n_channels: int = 2
    contrast: float = permeability.DEFAULT_CONTRAST
    perturbation: float = 0.05
    n_realizations: int = 100
    n_train: int = 90
    n_configs: int = 10
    holdout_configuration: bool = False
    ic_low: float = 0.0
    ic_high: float = 0.05
    well_rate: float = 0.3
    well_width: float = data.WELL_WIDTH
    rate_variation: float = 0.5
    rate_amplitude_range: list = field(default_factory=lambda: [0.5, 1.5])
    kappa_lattice: int = 8
    layers: list = None
    neurons: list = None
    network_mode: str = "universal"
    output_activation: str = "linear"
    hidden_slope: float = network.DEFAULT_SLOPE
    input_source: str = "simulation"
    n_observation_test: int = 10
    case2_loss: str = "weighted"
    training: dict = field(default_factory=lambda: asdict(TrainingConfig()))
    seed: int = 0
    write_artifacts: bool = True

    def __post_init__(self):
        if self.experiment not in (1, 2, 3, 4):
            raise ValueError(f"experiment must be 1-4, got {self.experiment}")
        layers, neurons = _DEFAULT_SWEEPS[self.experiment]
        if self.layers is None:
            self.layers = list(layers)
        if self.neurons is None:
            self.neurons = list(neurons)
        if self.network_mode not in ("universal", "per_step"):
            raise ValueError("network_mode must be 'universal' or 'per_step'")
        if self.input_source not in ("simulation", "observation"):
            raise ValueError("input_source must be 'simulation' or 'observation'")
        if len(self.observation_points) != self.n_modes:
            raise ValueError("one observation point per mode required")
        # canonical form so the config survives a JSON round trip unchanged
        self.observation_points = [[float(x), float(y)] for x, y in self.observation_points]
        self.rate_amplitude_range = [float(v) for v in self.rate_amplitude_range]
        self.training = asdict(TrainingConfig(**self.training))

    def training_config(self, **overrides):
        return TrainingConfig(**dict(self.training, **overrides))

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def default_config(experiment, **overrides):
    return ExperimentConfig(experiment=experiment, **overrides)


@dataclass
class ErrorReport:
    experiment: int
    variant: str
    rows: list
    config: dict
    info: dict = field(default_factory=dict)

    def row(self, label):
        for r in self.rows:
            if r["label"] == label:
                return r
        raise KeyError(label)


# -- evaluation ------------------------------------------------------------

def evaluate_network(net, test_realizations, basis, mesh, M, encoding=data.InputEncoding(),
                     input_source="simulation"):
    """Mean 1-step and final-time L2 percentage errors over the test runs.

    Targets are each realization's own trajectory; predictions and targets
    are lifted to fields through the nodal basis before measuring.
    """
    one_step, final = [], []

    def pct(c_ref, c_pred):
        if not np.all(np.isfinite(c_pred)):
            return float("inf")
        return fem.l2_error(mesh, M, reconstruct_int(c_ref), reconstruct_int(c_pred))[1]

    def reconstruct_int(c):
        return pod.reconstruct(basis, c)

    for r in test_realizations:
        X, Y = data._pairs(r, encoding, input_source)
        for n in range(len(X)):
            step_net = net[n] if isinstance(net, (list, tuple)) else net
            with np.errstate(over="ignore", invalid="ignore"):
                pred = network.predict(step_net, X[n])
            one_step.append(pct(Y[n], pred))
        traj = network.rollout(net, r.c0, encoding.encode(r))
        final.append(pct(r.trajectory[-1], traj[-1]))
    with np.errstate(invalid="ignore"):
        return float(np.mean(one_step)), float(np.mean(final))


# -- pipeline stages -------------------------------------------------------

class _Stage:
    def __init__(self, name, seed):
        self.name, self.seed = name, seed

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, self.seed, exc) from exc
        return False


def _setup(cfg):
    mesh = fem.build_mesh(cfg.nx, cfg.ny)
    nodes = pod.select_observation_nodes(mesh, [tuple(p) for p in cfg.observation_points])
    centers = mesh.coords[nodes]
    setup = data.FlowSetup(mesh, cfg.alpha, cfg.dt, cfg.n_steps, centers,
                           well_width=cfg.well_width)
    return setup, nodes


def _fields(cfg, mesh):
    n = 1 if cfg.experiment in (1, 4) else cfg.n_configs
    return [permeability.gen_channelized(derive_seed(cfg.seed, "perm", i), cfg.n_channels,
                                         cfg.contrast, mesh) for i in range(n)]


def _rates(cfg, n_wells, run):
    if cfg.experiment in (1, 2):
        return data.constant_rates(cfg.n_steps, n_wells, cfg.well_rate)
    if cfg.experiment == 3:
        return data.sinusoidal_rates(cfg.n_steps, n_wells, derive_seed(cfg.seed, "rates"),
                                     cfg.well_rate, cfg.rate_variation)
    return data.sinusoidal_rates(cfg.n_steps, n_wells, derive_seed(cfg.seed, "rates", run),
                                 cfg.well_rate, cfg.rate_variation, cfg.rate_amplitude_range)


def _build_basis(cfg, setup, nodes, runs):
    """POD nodal basis from fine snapshot runs ``(c0, perm, rates)``."""
    trajs = [data.snapshot_run(setup, c0, perm, rates) for c0, perm, rates in runs]
    snaps = pod.collect_snapshots(trajs)
    modes = pod.compute_pod(snaps, cfg.n_modes)
    basis = pod.build_nodal_basis(modes, nodes, setup.mesh)
    return basis, modes


def _encoding(cfg):
    return data.InputEncoding(include_kappa=cfg.experiment >= 2,
                              include_source=cfg.experiment >= 3,
                              lattice=cfg.kappa_lattice)


def _train_cell(args):
    dims, tcfg, dataset, slope, out_act, mode, n_steps = args
    net0 = network.init_network(dims, tcfg.seed, slope, out_act)
    if mode == "universal":
        net, hist = network.train(net0, dataset, tcfg)
        return net, (hist[-1] if hist else None)
    nets, last = [], []
    for n in range(n_steps):
        sub = dataset.subset(np.flatnonzero(dataset.step == n))
        net, hist = network.train(net0, sub, tcfg)
        nets.append(net)
        last.append(hist[-1] if hist else None)
    return nets, last


def _run_cells(cells, workers):
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_cell, cells))
    return [_train_cell(c) for c in cells]


def _prepare(cfg):
    """Realizations, basis and train/test lists for one experiment."""
    setup, nodes = _setup(cfg)
    m = cfg.n_modes
    with _Stage("fields", cfg.seed):
        perms = _fields(cfg, setup.mesh)
        if cfg.experiment == 4:
            kappa_o = perms[0]
            kappa_s = permeability.perturb(kappa_o, cfg.perturbation,
                                           derive_seed(cfg.seed, "perturb"), setup.mesh)
            perms = [kappa_o, kappa_s]

    n_total = cfg.n_realizations + (cfg.n_observation_test if cfg.experiment == 4 else 0)
    c0s = data.sample_initial_conditions(n_total, derive_seed(cfg.seed, "ic"), m,
                                         cfg.ic_low, cfg.ic_high)
    if cfg.experiment in (2, 3):
        per = cfg.n_realizations // cfg.n_configs
        groups = np.repeat(np.arange(cfg.n_configs), per)
        if groups.size != cfg.n_realizations:
            raise ValueError("n_realizations must be a multiple of n_configs")
    else:
        groups = np.zeros(n_total, dtype=int)
    rates = [_rates(cfg, m, i) for i in range(n_total)]

    # placeholder realizations fix the split before any data exist
    stubs = [data.SampleRealization(i, c0s[i], None, rates[i], np.zeros((1, m)), SIMULATION,
                                    int(groups[i])) for i in range(cfg.n_realizations)]
    split_seed = derive_seed(cfg.seed, "split")
    if cfg.experiment == 4:
        train_ids = list(range(cfg.n_realizations))
        test_ids = list(range(cfg.n_realizations, n_total))
    else:
        if cfg.experiment in (2, 3) and cfg.holdout_configuration:
            tr, te = data.holdout_group(stubs, cfg.n_configs - 1)
        else:
            tr, te = data.split(stubs, cfg.n_train, split_seed,
                                stratify=cfg.experiment in (2, 3))
        train_ids = sorted(r.run_id for r in tr)
        test_ids = sorted(r.run_id for r in te)

    sim_perm = (lambda i: perms[1]) if cfg.experiment == 4 else (lambda i: perms[groups[i]])
    with _Stage("basis", cfg.seed):
        basis, modes = _build_basis(cfg, setup, nodes,
                                    [(c0s[i], sim_perm(i), rates[i]) for i in train_ids])
        setup.basis = basis

    with _Stage("simulation", cfg.seed):
        sims = [data.generate_simulation_realization(c0s[i], sim_perm(i), rates[i], setup,
                                                     run_id=i, group=int(groups[i]))
                for i in range(n_total)]
    obs = None
    if cfg.experiment == 4:
        with _Stage("observation", cfg.seed):
            obs = []
            for i in range(n_total):
                o = data.generate_observation_realization(
                    c0s[i], perms[0], rates[i], setup, run_id=i, companion=sims[i])
                # the network sees the model field, not the true one
                o.input_perm = perms[1]
                obs.append(o)
    return dict(setup=setup, nodes=nodes, perms=perms, basis=basis, modes=modes,
                sims=sims, obs=obs, train_ids=train_ids, test_ids=test_ids)


def _cases(cfg, prep):
    sims, obs = prep["sims"], prep["obs"]
    n = cfg.n_realizations
    n_obs_small = cfg.n_realizations - cfg.n_train
    tcfg = cfg.training_config()
    return [
        ("Case 1", "C", sims[:n], tcfg),
        ("Case 2", "B", sims[:cfg.n_train] + obs[cfg.n_train:n],
         cfg.training_config(loss=cfg.case2_loss)),
        ("Case 3", "A", obs[:n], tcfg),
        ("Case 4", "A", obs[n - n_obs_small:n], tcfg),
    ]


def run_experiment(cfg, out_dir=None, dry_run=False, workers=1):
    """Run one experiment; returns the :class:`ErrorReport`.

    With ``out_dir`` the report, fields and network bundles are written
    there. ``dry_run`` stops after echoing the config and sample counts.
    """
    enc = _encoding(cfg)
    m = cfg.n_modes
    variant = "heldout" if (cfg.experiment in (2, 3) and cfg.holdout_configuration) else "shared"
    if dry_run:
        n_test = cfg.n_observation_test if cfg.experiment == 4 else cfg.n_realizations - cfg.n_train
        info = {"dry_run": True, "n_realizations": cfg.n_realizations,
                "n_train_pairs": (cfg.n_realizations if cfg.experiment == 4 else cfg.n_train) * cfg.n_steps,
                "n_test_realizations": n_test,
                "input_dim": m + enc.dim(m),
                "architectures": [[L, N] for L in cfg.layers for N in cfg.neurons]}
        return ErrorReport(cfg.experiment, variant, [], cfg.to_json(), info)

    prep = _prepare(cfg)
    setup, basis = prep["setup"], prep["basis"]
    M = setup.problem(prep["perms"][0], np.zeros((cfg.n_steps + 1, m))).mass
    in_dim = m + enc.dim(m)

    if cfg.experiment == 4:
        test = [prep["obs"][i] for i in prep["test_ids"]]
        jobs = []
        for ci, (label, mode, reals, tcfg) in enumerate(_cases(cfg, prep)):
            L, N = cfg.layers[0], cfg.neurons[0]
            with _Stage(f"dataset {label}", cfg.seed):
                ds = data.assemble_dataset(reals, mode, enc, cfg.input_source)
            tcfg = TrainingConfig(**dict(asdict(tcfg), seed=derive_seed(cfg.seed, "train", ci)))
            jobs.append((label, L, N, ds, tcfg))
    else:
        train = [prep["sims"][i] for i in prep["train_ids"]]
        test = [prep["sims"][i] for i in prep["test_ids"]]
        with _Stage("dataset", cfg.seed):
            ds = data.assemble_dataset(train, "C", enc)
        jobs = []
        for li, L in enumerate(cfg.layers):
            for ni, N in enumerate(cfg.neurons):
                tcfg = cfg.training_config(seed=derive_seed(cfg.seed, "train", li, ni))
                label = f"{L}x{N}"
                jobs.append((label, L, N, ds, tcfg))

    cells = [([in_dim] + [N] * L + [m], tcfg, ds, cfg.hidden_slope, cfg.output_activation,
              cfg.network_mode, cfg.n_steps) for _, L, N, ds, tcfg in jobs]
    with _Stage("training", cfg.seed):
        results = _run_cells(cells, workers)

    rows, nets = [], {}
    with _Stage("evaluation", cfg.seed):
        for (label, L, N, ds, _), (net, last_loss) in zip(jobs, results):
            one, fin = evaluate_network(net, test, basis, setup.mesh, M, enc, cfg.input_source)
            diverged = not np.isfinite(fin) or fin > DIVERGED_PCT
            rows.append({"label": label, "layers": L, "neurons": N, "n_train_pairs": len(ds),
                         "one_step": one, "final_time": fin, "diverged": bool(diverged)})
            nets[label] = net

    info = {
        "n_train_realizations": len(prep["train_ids"]),
        "n_test_realizations": len(prep["test_ids"]),
        "test_run_ids": [int(i) for i in prep["test_ids"]],
        "pod_singular_values": [float(s) for s in prep["modes"].spectrum[:2 * m]],
        "observation_nodes": [int(n) for n in prep["nodes"]],
        "metric_target": OBSERVATION if cfg.experiment == 4 else SIMULATION,
    }
    report = ErrorReport(cfg.experiment, variant, rows, cfg.to_json(), info)
    if out_dir is not None and cfg.write_artifacts:
        with _Stage("artifacts", cfg.seed):
            _write_artifacts(out_dir, cfg, prep, nets, test, enc, report)
    return report


# -- output ----------------------------------------------------------------

def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "layers", "neurons", "one_step_pct", "final_time_pct", "diverged"])
    for r in report.rows:
        w.writerow([r["label"], r["layers"], r["neurons"], _fmt(r["one_step"]),
                    _fmt(r["final_time"]), "diverged" if r["diverged"] else ""])
    return buf.getvalue()


def report_text(report):
    head = f"Experiment {report.experiment} ({report.variant}): mean L2 percentage error\n"
    lines = [f"{'label':<10}{'layers':>7}{'neurons':>9}{'1-step':>14}{'final-time':>14}"]
    for r in report.rows:
        flag = "  diverged" if r["diverged"] else ""
        lines.append(f"{r['label']:<10}{r['layers']:>7}{r['neurons']:>9}"
                     f"{r['one_step']:>14.4f}{r['final_time']:>14.4e}{flag}")
    return head + "\n".join(lines) + "\n"


def report_json(report):
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


def emit_report(report, out_dir):
    """Write ``report.csv``, ``report.txt`` and ``report.json``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, text in (("report.csv", report_csv(report)), ("report.txt", report_text(report)),
                       ("report.json", report_json(report))):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        paths[name] = path
    return paths


def _write_artifacts(out_dir, cfg, prep, nets, test, enc, report):
    from .fields import write_field_csv, write_pgm
    setup, basis = prep["setup"], prep["basis"]
    mesh = setup.mesh
    fdir = os.path.join(out_dir, "fields")
    ndir = os.path.join(out_dir, "networks")
    os.makedirs(fdir, exist_ok=True)
    os.makedirs(ndir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    pod.save_basis(basis, os.path.join(out_dir, "basis.csv"))
    for i, perm in enumerate(prep["perms"]):
        permeability.save_field(perm, os.path.join(fdir, f"kappa_{i}.csv"))
    r = test[0]
    ref = mesh.to_full(pod.reconstruct(basis, r.trajectory[-1]))
    write_field_csv(os.path.join(fdir, "reference_final.csv"), mesh, ref)
    write_pgm(os.path.join(fdir, "reference_final.pgm"), mesh, ref)
    for label, net in nets.items():
        safe = label.replace(" ", "_")
        traj = network.rollout(net, r.c0, enc.encode(r))
        if np.all(np.isfinite(traj[-1])):
            pred = mesh.to_full(pod.reconstruct(basis, traj[-1]))
            write_field_csv(os.path.join(fdir, f"predicted_final_{safe}.csv"), mesh, pred)
            write_pgm(os.path.join(fdir, f"predicted_final_{safe}.pgm"), mesh, pred)
        for k, n in enumerate(net if isinstance(net, list) else [net]):
            suffix = f"_step{k + 1}" if isinstance(net, list) else ""
            network.save_bundle(n, os.path.join(ndir, f"{safe}{suffix}.bundle"))
    emit_report(report, out_dir)
