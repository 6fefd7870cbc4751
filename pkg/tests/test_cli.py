"""End-to-end checks of the command-line interface.

Everything runs main() in process against real files under a temp
directory: the exit-code contract, artifact determinism, checkpoint
restore fidelity, and the inspect summaries.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from eqsnn import checkpoint as ck
from eqsnn import cli
from eqsnn import config as cfgmod
from eqsnn import datagen
from eqsnn import pipeline as pl
from eqsnn import quantile as qm
from eqsnn.exceptions import ConfigError
from eqsnn.training import EpochRecord, TrainingLog

CFG_TEXT = """\
data.channels = 4
data.length = 900
data.seed = 11
pipeline.window_len = 12
pipeline.stride = 4
pipeline.horizon = 2
pipeline.stage1_levels = 0.25,0.5,0.75
pipeline.stage2_levels = 0.4,0.6
pipeline.lookbacks = 2,6
pipeline.d_k = 4
pipeline.d_v = 4
pipeline.snn_hidden = 8
pipeline.t_window = 8
pipeline.stage1_epochs = 4
pipeline.stage2_epochs = 4
pipeline.autoenc_epochs = 2
pipeline.gta_epochs = 2
pipeline.snn_epochs = 3
pipeline.joint_epochs = 1
pipeline.seed = 5
fault.0.channel = 0
fault.0.kind = drift
fault.0.onset = 180
fault.0.duration = 110
fault.0.magnitude = 6
fault.1.channel = 1
fault.1.kind = drift
fault.1.onset = 430
fault.1.duration = 110
fault.1.magnitude = 6
fault.2.channel = 0
fault.2.kind = drift
fault.2.onset = 700
fault.2.duration = 110
fault.2.magnitude = 6
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def cfg_path(ws):
    path = ws / "tiny.eqc"
    path.write_text(CFG_TEXT)
    return path


@pytest.fixture(scope="module")
def data_csv(ws, cfg_path):
    out = ws / "data"
    assert cli.main(["generate", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
    return out / cli.DATA_CSV


@pytest.fixture(scope="module")
def run_dir(ws, cfg_path, data_csv):
    out = ws / "run"
    assert cli.main(["train", "--config", str(cfg_path),
                     "--data", str(data_csv), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def evaluated(cfg_path, data_csv, run_dir):
    # eval reads checkpoints from --out and writes the report beside them
    assert cli.main(["eval", "--config", str(cfg_path),
                     "--data", str(data_csv), "--out", str(run_dir),
                     "--dump-attention", "--dump-spikes"]) == 0
    return run_dir


@pytest.fixture(scope="module")
def mem_model(cfg_path, data_csv):
    cfg = cfgmod.load_config(cfg_path)
    settings = cli._settings_from(cfg, None, None)
    dataset = datagen.read_csv(data_csv)
    model, _ = pl.train_pipeline(dataset, settings)
    return model


def read_rows(path):
    lines = Path(path).read_text().strip().split("\n")
    return lines[0], [line.split(",") for line in lines[1:]]


class TestGenerate:

    def test_deterministic_bytes(self, ws, cfg_path, data_csv):
        out = ws / "data_again"
        assert cli.main(["generate", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        for name in (cli.DATA_CSV, cli.DATA_SIDECAR):
            assert (out / name).read_bytes() == \
                (data_csv.parent / name).read_bytes()

    def test_missing_config_is_config_error(self, ws):
        code = cli.main(["generate", "--config", str(ws / "absent.eqc"),
                         "--out", str(ws / "x")])
        assert code == cli.EXIT_CONFIG

    def test_eight_channel_header(self, ws, capsys):
        cfg = ws / "wide.eqc"
        cfg.write_text("data.channels = 8\ndata.length = 400\n"
                       "data.seed = 3\n")
        out = ws / "wide"
        assert cli.main(["generate", "--config", str(cfg),
                         "--out", str(out)]) == 0
        header = (out / cli.DATA_CSV).read_text().split("\n", 1)[0]
        assert header == "t," + ",".join(
            f"ch_{i}" for i in range(8)) + ",label"
        captured = capsys.readouterr().out
        assert "400 steps x 8 channels" in captured
        assert "abnormal fraction 0.000" in captured

    def test_seed_flag_overrides_config(self, ws, cfg_path, data_csv):
        out = ws / "data_seeded"
        assert cli.main(["generate", "--config", str(cfg_path),
                         "--out", str(out), "--seed", "99"]) == 0
        assert (out / cli.DATA_CSV).read_bytes() != data_csv.read_bytes()


class TestTrain:

    def test_missing_prerequisites(self, ws, cfg_path, data_csv, capsys):
        out = ws / "empty_run"
        for stage in ("gta", "snn"):
            code = cli.main(["train", "--config", str(cfg_path),
                             "--data", str(data_csv), "--out", str(out),
                             "--stage", stage])
            assert code == cli.EXIT_DEPENDENCY
            assert "missing prerequisite" in capsys.readouterr().err

    def test_max_epochs_caps_training(self, ws, cfg_path, data_csv):
        out = ws / "short_run"
        assert cli.main(["train", "--config", str(cfg_path),
                         "--data", str(data_csv), "--out", str(out),
                         "--stage", "eqrnn", "--max-epochs", "1"]) == 0
        header, rows = read_rows(out / cli.LOG_FILES["eqrnn"])
        assert header == "epoch,train_loss,val_loss,lr"
        assert len(rows) == 1
        assert rows[0][0] == "0"

    def test_zero_max_epochs_rejected(self, ws, cfg_path, data_csv):
        code = cli.main(["train", "--config", str(cfg_path),
                         "--data", str(data_csv), "--out", str(ws / "z"),
                         "--stage", "eqrnn", "--max-epochs", "0"])
        assert code == cli.EXIT_CONFIG

    def test_missing_data_is_config_error(self, ws, cfg_path):
        code = cli.main(["train", "--config", str(cfg_path),
                         "--data", str(ws / "no_such.csv"),
                         "--out", str(ws / "y")])
        assert code == cli.EXIT_CONFIG

    def test_unknown_stage_rejected_by_parser(self, cfg_path, data_csv, ws):
        with pytest.raises(SystemExit) as err:
            cli.main(["train", "--config", str(cfg_path),
                      "--data", str(data_csv), "--out", str(ws / "w"),
                      "--stage", "bogus"])
        assert err.value.code == 2

    def test_retrain_is_byte_identical(self, ws, cfg_path, data_csv,
                                       run_dir):
        out = ws / "run_again"
        assert cli.main(["train", "--config", str(cfg_path),
                         "--data", str(data_csv), "--out", str(out)]) == 0
        names = list(cli.STAGE_FILES.values()) + list(cli.LOG_FILES.values())
        for name in names:
            assert (out / name).read_bytes() == (run_dir / name).read_bytes()


class TestEval:

    def test_before_training_is_dependency_error(self, ws, cfg_path,
                                                 data_csv):
        code = cli.main(["eval", "--config", str(cfg_path),
                         "--data", str(data_csv),
                         "--out", str(ws / "untrained")])
        assert code == cli.EXIT_DEPENDENCY

    def test_config_digest_mismatch(self, ws, cfg_path, data_csv, run_dir):
        other = ws / "other.eqc"
        other.write_text(CFG_TEXT.replace("pipeline.snn_epochs = 3",
                                          "pipeline.snn_epochs = 4"))
        code = cli.main(["eval", "--config", str(other),
                         "--data", str(data_csv), "--out", str(run_dir)])
        assert code == cli.EXIT_DIGEST

    def test_report_and_scores(self, evaluated, cfg_path, data_csv):
        report = (evaluated / cli.REPORT_FILE).read_text()
        header, rows = read_rows(evaluated / cli.SCORES_FILE)
        assert header == "window,score,label,prediction"
        settings = cli._settings_from(cfgmod.load_config(cfg_path),
                                      None, None)
        wins = datagen.window(datagen.read_csv(data_csv),
                              settings.window_len, settings.stride, ())
        assert f"windows = {wins.inputs.shape[0]}" in report
        assert len(rows) == wins.inputs.shape[0]
        scores = np.array([float(r[1]) for r in rows])
        assert np.all((scores > 0.0) & (scores < 1.0))
        assert set(r[3] for r in rows) <= {"0", "1"}

    def test_report_auc_matches_scores_file(self, evaluated):
        report = (evaluated / cli.REPORT_FILE).read_text()
        stated = float([line for line in report.split("\n")
                        if line.startswith("auc = ")][0].split(" = ")[1])
        _, rows = read_rows(evaluated / cli.SCORES_FILE)
        scores = np.array([float(r[1]) for r in rows])
        labels = np.array([int(r[2]) for r in rows], dtype=bool)
        assert abs(stated - pl.roc_auc(labels, scores)) < 1e-6

    def test_attention_rows_are_convex(self, evaluated):
        header, rows = read_rows(evaluated / cli.ATTENTION_FILE)
        assert header == "t,head,lag,weight"
        sums = {}
        for t, head, lag, weight in rows:
            sums.setdefault((t, head), 0.0)
            sums[(t, head)] += float(weight)
            assert float(weight) >= 0.0
        assert sums
        for total in sums.values():
            assert abs(total - 1.0) < 1e-9
        # one head per configured look-back
        assert set(r[1] for r in rows) == {"0", "1"}

    def test_spike_raster_is_binary(self, evaluated):
        header, rows = read_rows(evaluated / cli.SPIKES_FILE)
        assert header == "t,layer,neuron,spike"
        assert rows
        assert set(r[3] for r in rows) <= {"0", "1"}

    def test_restored_model_matches_memory(self, mem_model, run_dir,
                                           cfg_path, data_csv):
        # checkpoints quantize to float32, so scores agree to ~1e-6
        cfg = cfgmod.load_config(cfg_path)
        settings = cli._settings_from(cfg, None, None)
        dataset = datagen.read_csv(data_csv)
        loaded = cli._load_model(run_dir, settings, dataset.n_channels,
                                 cfgmod.config_digest(cfg))
        wins = datagen.window(dataset, settings.window_len,
                              settings.stride, ())
        np.testing.assert_allclose(loaded.score_windows(wins.inputs),
                                   mem_model.score_windows(wins.inputs),
                                   rtol=0.0, atol=1e-4)
        assert (loaded.calibrated_theta is None) == \
            (mem_model.calibrated_theta is None)
        if loaded.calibrated_theta is not None:
            assert abs(loaded.calibrated_theta
                       - mem_model.calibrated_theta) < 1e-6

    def test_scores_file_matches_loaded_model(self, evaluated, cfg_path,
                                              data_csv):
        cfg = cfgmod.load_config(cfg_path)
        settings = cli._settings_from(cfg, None, None)
        dataset = datagen.read_csv(data_csv)
        loaded = cli._load_model(evaluated, settings, dataset.n_channels,
                                 cfgmod.config_digest(cfg))
        wins = datagen.window(dataset, settings.window_len,
                              settings.stride, ())
        _, rows = read_rows(evaluated / cli.SCORES_FILE)
        written = np.array([float(r[1]) for r in rows])
        np.testing.assert_allclose(written,
                                   loaded.score_windows(wins.inputs),
                                   rtol=0.0, atol=1e-9)


class TestInspect:

    def test_reference_encoder_summary(self, ws, capsys):
        path = ws / "reference.eqsn"
        ckpt = ck.Checkpoint(stage="eqrnn", seed=0,
                             dims=qm.ENCODER_DIMS + qm.DECODER_DIMS,
                             arrays={})
        ck.save_checkpoint(path, ckpt)
        assert cli.main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "encoder formula total: 163805" in out
        assert "reported encoder total: 156245" in out
        assert "19880" in out and "12320" in out
        assert out.count("MISMATCH") == 1
        assert out.count("   ok") == 9
        assert "decoder formula total: 156268" in out

    def test_trained_checkpoint_summary(self, run_dir, cfg_path, capsys):
        assert cli.main(["inspect",
                         str(run_dir / cli.STAGE_FILES["eqrnn"])]) == 0
        out = capsys.readouterr().out
        assert "stage: eqrnn" in out
        # four channels is not the reference schedule
        assert "reported" not in out
        digest = cfgmod.config_digest(cfgmod.load_config(cfg_path))
        assert f"config digest: {digest.hex()}" in out

    def test_gta_summary(self, ws, capsys):
        path = ws / "gta_dims.eqsn"
        ck.save_checkpoint(path, ck.Checkpoint(
            stage="gta", seed=0, dims=(20, 8, 8, 3, 9, 27), arrays={}))
        assert cli.main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "heads: 3" in out
        assert "per-head parameters: 1460" in out
        assert "attention total: 4380" in out

    def test_snn_summary(self, ws, capsys):
        path = ws / "snn_dims.eqsn"
        ck.save_checkpoint(path, ck.Checkpoint(
            stage="snn", seed=0, dims=(70, 64, 64, 1), arrays={}))
        assert cli.main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "spiking layers: 70 -> 64 -> 64 -> 1" in out
        assert "formula total (weights + per-neuron biases): 8769" in out

    def test_bad_magic_is_corrupt(self, ws):
        path = ws / "junk.eqsn"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        assert cli.main(["inspect", str(path)]) == cli.EXIT_CORRUPT

    def test_truncated_is_corrupt(self, ws, run_dir):
        blob = (run_dir / cli.STAGE_FILES["snn"]).read_bytes()
        path = ws / "cut.eqsn"
        path.write_bytes(blob[:30])
        assert cli.main(["inspect", str(path)]) == cli.EXIT_CORRUPT

    def test_future_version_is_corrupt(self, ws, run_dir):
        blob = bytearray((run_dir / cli.STAGE_FILES["snn"]).read_bytes())
        blob[4] = ck.FORMAT_VERSION + 1    # little-endian u32 after magic
        path = ws / "future.eqsn"
        path.write_bytes(bytes(blob))
        assert cli.main(["inspect", str(path)]) == cli.EXIT_CORRUPT

    def test_missing_file_is_config_error(self, ws):
        code = cli.main(["inspect", str(ws / "nowhere.eqsn")])
        assert code == cli.EXIT_CONFIG


class TestHelpers:

    def test_thread_env_caps_workers(self, monkeypatch):
        monkeypatch.setenv("EQSNN_THREADS", "3")
        assert cli.worker_cap(default=8) == max(
            1, min(3, min(8, os.cpu_count() or 1)))

    def test_thread_env_floor_is_one(self, monkeypatch):
        monkeypatch.setenv("EQSNN_THREADS", "0")
        assert cli.worker_cap(default=8) == 1

    def test_thread_env_must_be_integer(self, monkeypatch):
        monkeypatch.setenv("EQSNN_THREADS", "many")
        with pytest.raises(ConfigError):
            cli.worker_cap()

    def test_default_worker_cap(self, monkeypatch):
        monkeypatch.delenv("EQSNN_THREADS", raising=False)
        assert cli.worker_cap(default=2) == max(
            1, min(2, os.cpu_count() or 1))

    def test_log_csv_has_no_wall_clock(self):
        log = TrainingLog()
        log.add(EpochRecord(0, 0.5, 0.25, 1e-3, 12.75))
        log.add(EpochRecord(1, 0.4, 0.2, 1e-3, 99.9))
        text = cli.log_csv(log)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert lines[1] == "0,0.5,0.25,0.001"
        assert "12.75" not in text and "99.9" not in text
