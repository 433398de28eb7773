"""Synthetic generator and dataset format tests."""

import dataclasses

import numpy as np
import pytest
import scipy.stats

from mango import backend
from mango.data import (DatasetShapeError, DatasetTruncatedError,
                        DatasetVersionError, MetaDataset, SimulationUnstableError,
                        SpringWorld, build_topology, dataset_digest,
                        generate_meta_dataset, mechanical_energy, read_dataset,
                        sample_stiffness, sample_world, simulate_trial,
                        write_dataset)

# collider parked safely below the plate; nothing ever touches
NO_CONTACT = dict(collider_radius=0.04, push_depth=-0.06)


def small_dataset(seed=3, tasks=4, trials=4, horizon=6):
    return generate_meta_dataset(tasks, trials_per_task=trials, horizon=horizon,
                                 seed=seed)


class TestSimulation:
    def test_sag_decreases_with_stiffness(self):
        maxima = []
        for k in (300.0, 950.0, 3000.0):
            trial = simulate_trial(SpringWorld(stiffness=k, **NO_CONTACT))
            disp = np.linalg.norm(trial.y_p - trial.p0[None], axis=-1)
            maxima.append(disp.max())
        assert maxima[0] > maxima[1] > maxima[2]

    def test_zero_gravity_no_collider_is_static(self):
        world = SpringWorld(stiffness=800.0, gravity=0.0, **NO_CONTACT)
        trial = simulate_trial(world)
        np.testing.assert_array_equal(trial.y_p,
                                      np.broadcast_to(trial.p0, trial.y_p.shape))
        np.testing.assert_array_equal(trial.y_v, np.zeros_like(trial.y_v))

    def test_bit_identical_reruns(self):
        world = SpringWorld(stiffness=1234.5)
        a = simulate_trial(world)
        b = simulate_trial(world)
        for name in ("p0", "v0", "p_ext", "v_ext", "h", "y_p", "y_v"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_energy_non_increasing_without_contact(self):
        world = SpringWorld(stiffness=2000.0, **NO_CONTACT)
        _, energy = simulate_trial(world, record_energy=True)
        rel_increase = np.diff(energy) / np.maximum(np.abs(energy[:-1]), 1.0)
        assert rel_increase.max() <= 1e-6

    def test_stiffness_ordering_on_five_point_grid(self):
        grid = np.exp(np.linspace(np.log(300.0), np.log(3000.0), 5))
        means = []
        for k in grid:
            trial = simulate_trial(SpringWorld(stiffness=float(k), **NO_CONTACT))
            means.append(np.linalg.norm(trial.y_p - trial.p0[None], axis=-1).mean())
        assert all(means[i] > means[i + 1] for i in range(4))

    def test_unstable_config_rejected(self):
        with pytest.raises(SimulationUnstableError):
            simulate_trial(SpringWorld(stiffness=1e7))

    def test_runaway_integration_reports_instability(self):
        # negative damping pumps energy; the 10x-box guard must trip
        world = SpringWorld(stiffness=2500.0, viscous_damping=-40.0,
                            spring_damping=-5.0)
        with pytest.raises(SimulationUnstableError, match="frame"):
            simulate_trial(world)

    def test_positions_stay_in_unit_box(self):
        for trial_idx in range(3):
            world = sample_world(11, 0, trial_idx, 700.0)
            trial = simulate_trial(world)
            for arr in (trial.y_p, trial.p_ext):
                assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestGeneration:
    def test_all_trials_share_rho(self):
        meta = small_dataset()
        for task in meta.tasks:
            # rho lives at task level: one value, shared by every trial
            assert task.rho.shape == (1,)
            assert len(task.trials) == 4
        stiffness = [float(t.rho[0]) for t in meta.tasks]
        assert len(set(stiffness)) == len(stiffness)  # tasks differ

    def test_splits_are_disjoint(self):
        meta = generate_meta_dataset(12, trials_per_task=2, horizon=4, seed=5)
        ids = [set(v) for v in meta.splits.values()]
        assert ids[0] | ids[1] | ids[2] == set(range(12))
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_stiffness_distribution_log_uniform(self):
        samples = np.array([sample_stiffness(17, i) for i in range(100)])
        lo, hi = np.log(300.0), np.log(3000.0)
        stat = scipy.stats.kstest(np.log(samples), "uniform", args=(lo, hi - lo))
        assert stat.pvalue > 0.01

    def test_generation_deterministic(self):
        a = small_dataset(seed=9)
        b = small_dataset(seed=9)
        for ta, tb in zip(a.tasks, b.tasks):
            np.testing.assert_array_equal(ta.rho, tb.rho)
            for x, y in zip(ta.trials, tb.trials):
                np.testing.assert_array_equal(x.y_p, y.y_p)

    def test_backend_parity_bit_exact(self):
        if not backend.compiled_available:
            pytest.skip("compiled kernels not built")
        try:
            backend.set_backend("compiled")
            a = small_dataset(seed=21, tasks=2, trials=2, horizon=4)
            backend.set_backend("pure")
            b = small_dataset(seed=21, tasks=2, trials=2, horizon=4)
        finally:
            backend.set_backend("compiled")
        for ta, tb in zip(a.tasks, b.tasks):
            for x, y in zip(ta.trials, tb.trials):
                np.testing.assert_array_equal(x.y_p, y.y_p)
                np.testing.assert_array_equal(x.y_v, y.y_v)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        meta = small_dataset()
        write_dataset(meta, tmp_path)
        loaded = read_dataset(tmp_path)
        assert loaded.splits == meta.splits
        assert loaded.horizon == meta.horizon
        np.testing.assert_array_equal(loaded.topology.senders, meta.topology.senders)
        for ta, tb in zip(meta.tasks, loaded.tasks):
            np.testing.assert_array_equal(ta.rho, tb.rho)
            for x, y in zip(ta.trials, tb.trials):
                for name in ("p0", "v0", "p_ext", "v_ext", "h", "y_p", "y_v"):
                    np.testing.assert_array_equal(getattr(x, name), getattr(y, name))

    def test_corrupted_shape_field_detected(self, tmp_path):
        meta = small_dataset()
        write_dataset(meta, tmp_path)
        target = tmp_path / "task_0001.bin"
        raw = bytearray(target.read_bytes())
        # first array header: magic(7) + version(1) + d_rho(4) + rho(8) + counts(24)
        # then name_len(2) + name(2) + ndim(1); corrupt the first shape dim
        offset = 7 + 1 + 4 + 8 + 24 + 2 + 2 + 1
        raw[offset] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises((DatasetShapeError, DatasetTruncatedError)):
            read_dataset(tmp_path)

    def test_version_mismatch_detected(self, tmp_path):
        meta = small_dataset()
        write_dataset(meta, tmp_path)
        target = tmp_path / "task_0000.bin"
        raw = bytearray(target.read_bytes())
        raw[7] = 99  # schema version byte
        target.write_bytes(bytes(raw))
        with pytest.raises(DatasetVersionError):
            read_dataset(tmp_path)

    def test_truncated_file_detected(self, tmp_path):
        meta = small_dataset()
        write_dataset(meta, tmp_path)
        target = tmp_path / "task_0002.bin"
        raw = target.read_bytes()
        target.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(DatasetTruncatedError):
            read_dataset(tmp_path)

    def test_manifest_counts_match_on_disk(self, tmp_path):
        meta = small_dataset(tasks=4)
        write_dataset(meta, tmp_path)
        loaded = read_dataset(tmp_path)
        assert len(loaded.tasks) == 4
        for task in loaded.tasks:
            assert len(task.trials) == 4
            for trial in task.trials:
                trial.validate(loaded.topology)
                assert trial.horizon == loaded.horizon

    def test_digest_stable_and_sensitive(self, tmp_path):
        meta = small_dataset()
        write_dataset(meta, tmp_path)
        d1 = dataset_digest(tmp_path)
        assert d1 == dataset_digest(tmp_path)
        raw = bytearray((tmp_path / "task_0000.bin").read_bytes())
        raw[-1] ^= 0x01
        (tmp_path / "task_0000.bin").write_bytes(bytes(raw))
        assert dataset_digest(tmp_path) != d1


class TestTopology:
    def test_world_edges_connect_ring_to_bottom_row(self):
        world = SpringWorld()
        topo = build_topology(world)
        assert topo.num_nodes == 81 + 16
        world_mask = topo.edge_static[:, 2] == 1.0
        senders = topo.senders[world_mask]
        receivers = topo.receivers[world_mask]
        plate_side = np.minimum(senders, receivers)
        assert plate_side.max() < 9  # bottom row only
        assert world_mask.sum() == 2 * 16 * 9

    def test_every_undirected_edge_stored_twice(self):
        topo = build_topology(SpringWorld())
        pairs = set(zip(topo.senders.tolist(), topo.receivers.tolist()))
        assert all((b, a) in pairs for a, b in pairs)
        assert len(pairs) == topo.num_edges
