"""Config files, checkpoints, the experiment driver, and the command line."""

import json
import subprocess
import sys

import numpy as np
import pytest

from fronthaul import checkpoint, config as config_mod, data, experiment, protocol


class TestConfigParsing:
    def test_defaults_round_trip(self):
        cfg = config_mod.parse_config_text("")
        assert cfg == config_mod.default_config()
        rendered = config_mod.render_config(cfg)
        assert config_mod.parse_config_text(rendered) == cfg

    def test_typed_values(self):
        cfg = config_mod.parse_config_text(
            "rounds = 12\n"
            "eta = 0.25\n"
            "async = true\n"
            "snr_up_db = 5, 15\n"
            "encoder_hidden = 64,32\n"
            "eval_snr_db = none\n"
            "architecture = mhnet\n")
        assert cfg["rounds"] == 12
        assert cfg["eta"] == 0.25
        assert cfg["async"] is True
        assert cfg["snr_up_db"] == (5.0, 15.0)
        assert cfg["encoder_hidden"] == (64, 32)
        assert cfg["eval_snr_db"] is None
        assert cfg["architecture"] == "mhnet"

    def test_comments_and_blanks_ignored(self):
        cfg = config_mod.parse_config_text("# header\n\nrounds = 3  # inline\n")
        assert cfg["rounds"] == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(config_mod.ConfigError, match="unknown key"):
            config_mod.parse_config_text("rouns = 3\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(config_mod.ConfigError, match="duplicate"):
            config_mod.parse_config_text("rounds = 3\nrounds = 4\n")

    def test_bad_value_names_line_and_key(self):
        with pytest.raises(config_mod.ConfigError, match="line 2.*eta"):
            config_mod.parse_config_text("rounds = 3\neta = fast\n")

    def test_bad_choice_rejected(self):
        with pytest.raises(config_mod.ConfigError, match="one of"):
            config_mod.parse_config_text("optimizer = momentum\n")

    def test_to_training_config_validates(self):
        cfg = config_mod.parse_config_text("message_dim = 7\n")
        with pytest.raises(config_mod.ConfigError):
            config_mod.to_training_config(cfg, obs_dim=81, n_classes=4)


class TestCheckpoint:
    def _params(self, seed=0):
        rng = np.random.default_rng(seed)
        return {"cloud.z0.dense0.w": rng.normal(size=(4, 3)),
                "encoder0.dense0.b": rng.normal(size=5),
                "encoder0.dense0.w": rng.normal(size=(5, 7))}

    def test_roundtrip_bit_identical(self, tmp_path):
        params = self._params()
        path = tmp_path / "state.bin"
        checkpoint.save_checkpoint(path, params, "rounds = 3\n", round_index=3)
        got, text, rnd = checkpoint.load_checkpoint(path)
        assert text == "rounds = 3\n" and rnd == 3
        assert set(got) == set(params)
        for name in params:
            assert np.array_equal(got[name], params[name])
            assert got[name].dtype == np.float64

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.load_checkpoint(path)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        path = tmp_path / "state.bin"
        checkpoint.save_checkpoint(path, self._params(), "", 0)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(checkpoint.CheckpointError, match="99.*1"):
            checkpoint.load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "state.bin"
        checkpoint.save_checkpoint(path, self._params(), "", 0)
        raw = path.read_bytes()
        for cut in (2, len(raw) // 2, len(raw) - 3):
            (tmp_path / "cut.bin").write_bytes(raw[:cut])
            with pytest.raises(checkpoint.CheckpointError, match="truncated"):
                checkpoint.load_checkpoint(tmp_path / "cut.bin")

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "state.bin"
        checkpoint.save_checkpoint(path, self._params(), "", 0)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(checkpoint.CheckpointError, match="trailing"):
            checkpoint.load_checkpoint(path)

    def test_loading_into_mismatched_state_rejected(self):
        ds = data.generate_synthetic(1, n_classes=3, grid=8, window=6,
                                     samples=(32, 8, 8))
        cfg_a = protocol.TrainingConfig(n_train=2, message_dim=8, n_branches=2,
                                        latent_dim=6, cloud_hidden=8,
                                        encoder_hidden=(10,), n_classes=3,
                                        obs_dim=36, rounds=1, batch_size=4,
                                        master_seed=0)
        import dataclasses
        cfg_b = dataclasses.replace(cfg_a, latent_dim=5)
        state_a = protocol.init_state(cfg_a, ds)
        state_b = protocol.init_state(cfg_b, ds)
        params = protocol.state_parameters(state_a)
        with pytest.raises(ValueError, match="shape|names"):
            protocol.load_state_parameters(state_b, params)


def small_config_text(**overrides):
    base = {
        "classes": 3, "grid": 8, "window": 6,
        "train_samples": 64, "val_samples": 24, "test_samples": 24,
        "message_dim": 8, "branches": 2, "latent_dim": 6, "cloud_hidden": 10,
        "encoder_hidden": "12", "n_train": 3, "rounds": 6, "batch_size": 8,
        "eta": 0.05, "val_cadence": 3, "eval_snr_grid": "0,20",
        "master_seed": 77,
    }
    base.update(overrides)
    return "".join(f"{k} = {v}\n" for k, v in base.items())


class TestExperimentDriver:
    def test_training_run_writes_all_artifacts(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text())
        result = experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        out = tmp_path / "out"
        assert (out / "metrics.csv").exists()
        assert (out / "checkpoint.bin").exists()
        assert (out / "result.json").exists()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == ",".join(experiment.CSV_COLUMNS)
        payload = json.loads((out / "result.json").read_text())
        assert len(payload["grid"]) == 2  # two SNR points, one population
        assert result.final_round == 6

    def test_metrics_row_count_follows_cadence(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(rounds=12, val_cadence=3))
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1 + 12 // 3

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text())
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "a")
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
            (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "result.json").read_bytes() == \
            (tmp_path / "b" / "result.json").read_bytes()

    def test_seed_override_changes_results(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text())
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "a")
        experiment.run_experiment(cfg_path, seed=123, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != \
            (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_shared_checkpoint_scales_to_larger_population(self, tmp_path):
        """A four-node shared-encoder checkpoint evaluates at eight nodes."""
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(encoder_sharing="true", n_train=4))
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        state, cfg = experiment.restore_state(tmp_path / "out" / "checkpoint.bin")
        assert cfg["n_train"] == 4
        acc, loss = protocol.evaluate(state, "test", n_test=8, snr_db=10.0)
        assert 0.0 <= acc <= 1.0 and np.isfinite(loss)

    def test_eval_command_uses_checkpoint(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text())
        experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        eval_cfg = tmp_path / "eval.txt"
        eval_cfg.write_text(small_config_text(
            checkpoint=str(tmp_path / "out" / "checkpoint.bin"),
            eval_snr_grid="5"))
        result = experiment.run_eval(config_mod.load_config(eval_cfg),
                                     tmp_path / "eval_out")
        assert len(result.grid) == 1
        assert (tmp_path / "eval_out" / "result.json").exists()

    def test_snr_sweep_rows(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(sweep="snr", sweep_values="0,10,20"))
        result = experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        assert [r["value"] for r in result.rows] == [0.0, 10.0, 20.0]
        lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
        assert lines[0] == "sweep,value,accuracy,loss,rounds_to_target"
        assert len(lines) == 4

    def test_ntest_sweep_requires_sharing_for_growth(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(sweep="ntest", sweep_values="1,2,3,6",
                                              encoder_sharing="true"))
        result = experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        assert [r["value"] for r in result.rows] == [1, 2, 3, 6]

    def test_batch_sweep_trains_per_value(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(sweep="batch", sweep_values="4,8",
                                              target_accuracy="0.0"))
        result = experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        assert len(result.rows) == 2
        assert all(r["rounds_to_target"] is not None for r in result.rows)

    def test_external_dataset_config(self, tmp_path):
        rng = np.random.default_rng(8)
        for name, n in (("train", 32), ("val", 8), ("test", 8)):
            data.save_external(tmp_path / f"{name}.bin", rng.normal(size=(n, 8, 8)),
                               rng.integers(0, 3, size=n), 3)
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(small_config_text(
            dataset="external",
            external_train=str(tmp_path / "train.bin"),
            external_val=str(tmp_path / "val.bin"),
            external_test=str(tmp_path / "test.bin"),
            rounds=2, batch_size=4))
        result = experiment.run_experiment(cfg_path, out_dir=tmp_path / "out")
        assert result.final_round == 2


class TestNumericSuites:
    def test_gradcheck_passes_quickly(self):
        report = experiment.run_gradcheck(seed=1, stack_instances=12, cloud_repeats=2)
        assert report["ok"], report
        assert report["instances"] == 12 + 4 * 2

    def test_equivalence_passes_quickly(self):
        report = experiment.run_equivalence(seed=1, rounds=6, fedavg_rounds=4)
        assert report["ok"], report
        assert report["dedicated_max_dev"] < 1e-10
        assert report["fedavg_max_dev"] < 1e-10


class TestPartialResults:
    def test_metrics_rows_survive_interruption(self, tmp_path):
        """Rows written before a failure stay on disk (flushed per row)."""
        writer = experiment._MetricsWriter(tmp_path / "metrics.csv", cadence=1)
        record = protocol.RoundRecord(
            round_index=1, batch_indices=np.arange(4), active_mask=np.ones((4, 2)),
            train_loss=1.5, snr_up_db_mean=10.0, snr_dn_db_mean=12.0,
            mean_active=2.0, param_norm_cloud=3.0, param_norm_edges=4.0,
            uplink_values=64, downlink_values=64, redraw_count=0)
        writer.add(record)
        try:
            raise KeyboardInterrupt
        except KeyboardInterrupt:
            writer.close()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("1,")


class TestCli:
    def _run(self, *args):
        return subprocess.run([sys.executable, "-m", "fronthaul", *args],
                              capture_output=True, text=True)

    def test_missing_config_file_exits_one(self, tmp_path):
        proc = self._run("train", "--config", str(tmp_path / "nope.txt"))
        assert proc.returncode == 1
        assert "error" in proc.stderr

    def test_bad_config_exits_one(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("not_a_key = 3\n")
        proc = self._run("train", "--config", str(cfg))
        assert proc.returncode == 1
        assert "unknown key" in proc.stderr

    def test_train_and_eval_commands(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(small_config_text())
        proc = self._run("train", "--config", str(cfg), "--out-dir",
                         str(tmp_path / "out"))
        assert proc.returncode == 0, proc.stderr
        assert "accuracy=" in proc.stdout
        eval_cfg = tmp_path / "eval.txt"
        eval_cfg.write_text(small_config_text(
            checkpoint=str(tmp_path / "out" / "checkpoint.bin")))
        proc = self._run("eval", "--config", str(eval_cfg), "--out-dir",
                         str(tmp_path / "eval_out"))
        assert proc.returncode == 0, proc.stderr

    def test_failed_numeric_check_exits_two(self, monkeypatch, capsys):
        from fronthaul import cli
        monkeypatch.setattr(cli.experiment, "run_gradcheck",
                            lambda seed: {"ok": False, "instances": 1,
                                          "max_rel_err": 1.0, "tolerance": 1e-5,
                                          "elapsed_s": 0.0})
        assert cli.main(["gradcheck"]) == 2
