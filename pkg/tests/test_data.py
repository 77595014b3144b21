import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from podnet import data, fem, permeability, pod
from podnet.errors import DatasetError
from podnet.network import OBSERVATION, SIMULATION

MESH = fem.build_mesh(16, 16)


@pytest.fixture(scope="module")
def setup():
    nodes = pod.select_observation_nodes(MESH)
    s = data.FlowSetup(MESH, 20.0, 0.1, 4, MESH.coords[nodes])
    kappa = permeability.gen_channelized(0, 2, 1000.0, MESH)
    rates = data.constant_rates(4, 5, 0.3)
    c0s = data.sample_initial_conditions(6, 1, high=0.05)
    trajs = [data.snapshot_run(s, c, kappa, rates) for c in c0s]
    s.basis = pod.build_nodal_basis(pod.compute_pod(pod.collect_snapshots(trajs), 5), nodes, MESH)
    return s, kappa, rates


def test_initial_conditions():
    c = data.sample_initial_conditions(100, 3)
    assert c.shape == (100, 5)
    assert c.min() >= 0 and c.max() <= 1
    assert np.array_equal(c, data.sample_initial_conditions(100, 3))
    with pytest.raises(ValueError):
        data.sample_initial_conditions(0, 3)


def test_initial_condition_mean():
    c = data.sample_initial_conditions(20000, 0)
    # standard error of a U(0, 1) mean over 20000 draws is about 0.002
    assert np.all(np.abs(c.mean(axis=0) - 0.5) < 0.01)


def test_well_source_unit_mass_and_schedule():
    centers = np.array([[0.5, 0.5]])
    src = data.WellSource(centers, [[1.0], [2.0]], dt=0.1)
    b = fem.assemble_load(MESH, src, 0.1, eliminate=False)
    assert b.sum() == pytest.approx(2.0, rel=1e-2)
    with pytest.raises(ValueError):
        src.rates_at(0.3)


def test_sinusoidal_rates():
    r = data.sinusoidal_rates(10, 5, seed=0, rate=0.3, variation=0.5)
    assert r.shape == (11, 5)
    assert r.min() >= 0.15 - 1e-12 and r.max() <= 0.45 + 1e-12
    assert np.allclose(r[0], r[-1])
    assert np.array_equal(r, data.sinusoidal_rates(10, 5, seed=0, rate=0.3, variation=0.5))


def test_kappa_features():
    enc = data.InputEncoding(include_kappa=True)
    f = permeability.uniform_field(MESH, 100.0)
    assert np.allclose(enc.kappa_features(f), 2.0)
    assert enc.dim(5) == 64
    assert data.InputEncoding(include_kappa=True, include_source=True).dim(5) == 69


def test_simulation_realization_nodal_values(setup):
    s, kappa, rates = setup
    c0 = np.full(5, 0.02)
    r = data.generate_simulation_realization(c0, kappa, rates, s, run_id=3)
    assert r.trajectory.shape == (5, 5)
    assert r.provenance == SIMULATION
    assert np.array_equal(r.trajectory[0], c0)


def test_observation_realization_is_fine_solution_at_nodes(setup):
    s, kappa, rates = setup
    c0 = np.full(5, 0.02)
    sim = data.generate_simulation_realization(c0, kappa, rates, s)
    obs = data.generate_observation_realization(c0, kappa, rates, s, companion=sim)
    assert obs.provenance == OBSERVATION
    assert np.allclose(obs.trajectory[0], c0, atol=1e-12)
    u0 = MESH.to_full(pod.reconstruct(s.basis, c0))
    fine = fem.run_fine(s.problem(kappa, rates, u0))
    assert np.allclose(obs.trajectory, fine[:, s.basis.nodes], rtol=1e-12, atol=0)
    assert obs.companion is sim.trajectory


def _reals(n, provenance, group=lambda i: 0, k=3):
    out = []
    for i in range(n):
        traj = np.arange(i, i + k + 1, dtype=float)[:, None] * np.ones(2)
        r = data.SampleRealization(i, traj[0], permeability.uniform_field(MESH), np.zeros((k + 1, 2)),
                                   traj, provenance, group(i), traj + 100 if provenance == OBSERVATION else None)
        out.append(r)
    return out


def test_mode_counts():
    sims = _reals(90, SIMULATION, k=10)
    obs = _reals(10, OBSERVATION, k=10)
    assert len(data.assemble_dataset(sims, "C")) == 900
    mix = data.assemble_dataset(sims + obs, "B")
    assert len(mix) == 1000
    assert np.sum(mix.provenance == OBSERVATION) == 100


def test_mode_provenance_checks():
    sims, obs = _reals(2, SIMULATION), _reals(2, OBSERVATION)
    with pytest.raises(DatasetError):
        data.assemble_dataset(sims, "A")
    with pytest.raises(DatasetError):
        data.assemble_dataset(obs, "C")
    with pytest.raises(DatasetError):
        data.assemble_dataset(sims, "B")
    with pytest.raises(DatasetError):
        data.assemble_dataset(sims, "D")


def test_network_a_pairs_simulated_inputs_with_observed_outputs():
    obs = _reals(1, OBSERVATION)
    ds = data.assemble_dataset(obs, "A")
    assert np.array_equal(ds.X, obs[0].companion[:-1])
    assert np.array_equal(ds.Y, obs[0].trajectory[1:])
    own = data.assemble_dataset(obs, "A", input_source="observation")
    assert np.array_equal(own.X, obs[0].trajectory[:-1])


def test_inputs_carry_encoded_parameters():
    r = _reals(1, SIMULATION)[0]
    r.rates = np.arange(8.0).reshape(4, 2)
    enc = data.InputEncoding(include_kappa=True, include_source=True)
    ds = data.assemble_dataset([r], "C", enc)
    assert ds.X.shape == (3, 2 + 64 + 2)
    assert np.array_equal(ds.X[:, -2:], r.rates[1:])
    assert np.allclose(ds.X[:, 2:66], 0.0)
    r.input_perm = permeability.uniform_field(MESH, 10.0)
    assert np.allclose(data.assemble_dataset([r], "C", enc).X[:, 2:66], 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stratify=st.booleans())
def test_split_has_no_leakage(seed, stratify):
    reals = _reals(100, SIMULATION, group=lambda i: i // 10)
    train, test = data.split(reals, 90, seed, stratify=stratify)
    ids_tr = {r.run_id for r in train}
    ids_te = {r.run_id for r in test}
    assert len(ids_tr) == 90 and len(ids_te) == 10
    assert not ids_tr & ids_te
    if stratify:
        assert sorted(r.group for r in test) == list(range(10))


def test_split_bounds():
    with pytest.raises(ValueError):
        data.split(_reals(5, SIMULATION), 5, 0)


def test_holdout_group():
    reals = _reals(30, SIMULATION, group=lambda i: i // 10)
    train, test = data.holdout_group(reals, 2)
    assert {r.group for r in test} == {2}
    assert {r.group for r in train} == {0, 1}
    with pytest.raises(ValueError):
        data.holdout_group(reals, 7)


def test_dataset_roundtrip(tmp_path):
    ds = data.assemble_dataset(_reals(3, SIMULATION) + _reals(2, OBSERVATION), "B")
    data.save_dataset(ds, tmp_path / "d.csv", {"seed": 4})
    back = data.load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y, ds.Y)
    assert list(back.provenance) == list(ds.provenance)
    assert np.array_equal(back.run_id, ds.run_id) and np.array_equal(back.step, ds.step)
    import json
    manifest = json.loads((tmp_path / "d.json").read_text())
    assert manifest["n_pairs"] == len(ds) and manifest["seed"] == 4
