"""Synthetic dataset generation, cropping, and the external loader."""

import numpy as np
import pytest

from fronthaul import data


class TestGenerator:
    def test_same_seed_identical_dataset(self):
        a = data.generate_synthetic(5, samples=(64, 16, 16))
        b = data.generate_synthetic(5, samples=(64, 16, 16))
        assert np.array_equal(a.train_states, b.train_states)
        assert np.array_equal(a.train_labels, b.train_labels)
        assert np.array_equal(a.test_states, b.test_states)

    def test_label_distribution_uniform(self):
        ds = data.generate_synthetic(6, n_classes=4, samples=(10_000, 1, 1))
        freq = np.bincount(ds.train_labels, minlength=4) / 10_000
        assert np.all(np.abs(freq - 0.25) < 0.02)

    def test_full_state_probe_beats_single_crop(self):
        """A whole-grid linear probe outperforms a single-crop probe by a wide
        margin, so pooling several views genuinely carries information."""
        ds = data.generate_synthetic(7, n_classes=4, grid=16,
                                     samples=(2000, 100, 1000), window=9)
        full_acc, crop_acc = data.probe_gap(ds)
        assert full_acc - crop_acc >= 0.15

    def test_infeasible_sizes_rejected(self):
        with pytest.raises(ValueError, match="window"):
            data.generate_synthetic(0, grid=8, window=9)
        with pytest.raises(ValueError, match="class"):
            data.generate_synthetic(0, n_classes=1)
        with pytest.raises(ValueError, match="class"):
            data.generate_synthetic(0, n_classes=99)
        with pytest.raises(ValueError, match="sample"):
            data.generate_synthetic(0, samples=(0, 1, 1))

    def test_split_lookup(self):
        ds = data.generate_synthetic(8, samples=(8, 4, 2))
        assert len(ds.split("train")[1]) == 8
        assert len(ds.split("val")[1]) == 4
        assert len(ds.split("test")[1]) == 2
        with pytest.raises(ValueError):
            ds.split("holdout")


class TestCrops:
    def test_offsets_cover_expected_range(self):
        """A 12-of-16 crop draws offsets from {0..4} on both axes, and all
        five values actually occur."""
        ds = data.generate_synthetic(9, grid=16, window=12, samples=(4, 1, 1))
        rng = np.random.default_rng(0)
        state = ds.train_states[0]
        seen = set()
        for _ in range(100):
            for obs in data.crop_observations(ds, 0, 2, rng):
                assert obs.values.shape == (144,)
                patch = obs.values.reshape(12, 12)
                matches = [(r, c) for r in range(5) for c in range(5)
                           if np.array_equal(state[r:r + 12, c:c + 12], patch)]
                assert len(matches) == 1
                seen.add(matches[0])
        assert {r for r, _ in seen} == set(range(5))
        assert {c for _, c in seen} == set(range(5))

    def test_crop_values_match_grid_slices(self):
        ds = data.generate_synthetic(10, grid=16, window=9, samples=(4, 1, 1))
        rng = np.random.default_rng(1)
        obs = data.crop_observations(ds, 2, 5, rng)
        state = ds.train_states[2]
        found = 0
        for o in obs:
            patch = o.values.reshape(9, 9)
            for r in range(8):
                for c in range(8):
                    if np.array_equal(state[r:r + 9, c:c + 9], patch):
                        found += 1
                        break
                else:
                    continue
                break
        assert found == 5

    def test_window_equal_to_grid_is_full_state(self):
        ds = data.generate_synthetic(11, grid=8, window=8, samples=(4, 1, 1))
        obs = data.crop_observations(ds, 1, 3, np.random.default_rng(2))
        for o in obs:
            assert np.array_equal(o.values, ds.train_states[1].reshape(-1))

    def test_same_rng_position_identical_crops(self):
        ds = data.generate_synthetic(12, samples=(4, 1, 1))
        a = data.crop_observations(ds, 0, 4, np.random.default_rng(3))
        b = data.crop_observations(ds, 0, 4, np.random.default_rng(3))
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values)

    def test_crop_batch_matches_manual_slices(self):
        rng = np.random.default_rng(4)
        states = rng.normal(size=(5, 10, 10))
        offsets = rng.integers(0, 4, size=(5, 3, 2))
        out = data.crop_batch(states, offsets, 7)
        assert out.shape == (3, 5, 49)
        for i in range(3):
            for b in range(5):
                r, c = offsets[b, i]
                want = states[b, r:r + 7, c:c + 7].reshape(-1)
                assert np.array_equal(out[i, b], want)


class TestExternalFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        states = rng.normal(size=(6, 8, 8))
        labels = rng.integers(0, 3, size=6)
        path = tmp_path / "split.bin"
        data.save_external(path, states, labels, 3)
        got_states, got_labels, classes = data.load_external(path)
        assert np.array_equal(got_states, states)
        assert np.array_equal(got_labels, labels)
        assert classes == 3

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        path = tmp_path / "split.bin"
        data.save_external(path, rng.normal(size=(4, 6, 6)), np.zeros(4, int), 2)
        raw = path.read_bytes()
        for cut in (8, len(raw) - 5):
            (tmp_path / "cut.bin").write_bytes(raw[:cut])
            with pytest.raises(ValueError, match="truncated"):
                data.load_external(tmp_path / "cut.bin")

    def test_label_range_validated(self, tmp_path):
        path = tmp_path / "split.bin"
        data.save_external(path, np.zeros((2, 4, 4)), np.array([0, 5]), 3)
        with pytest.raises(ValueError, match="labels"):
            data.load_external(path)

    def test_dataset_assembly(self, tmp_path):
        rng = np.random.default_rng(7)
        for name, n in (("train", 10), ("val", 4), ("test", 4)):
            data.save_external(tmp_path / f"{name}.bin", rng.normal(size=(n, 8, 8)),
                               rng.integers(0, 2, size=n), 2)
        ds = data.load_external_dataset(tmp_path / "train.bin", tmp_path / "val.bin",
                                        tmp_path / "test.bin", window=6)
        assert ds.n_classes == 2 and ds.grid == 8 and ds.obs_dim == 36
        with pytest.raises(ValueError, match="window"):
            data.load_external_dataset(tmp_path / "train.bin", tmp_path / "val.bin",
                                       tmp_path / "test.bin", window=9)
