import os

import numpy as np
import pytest

import landau_cli
from landau.errors import ArtifactError, ConfigError, TrainingDiverged
from landau.services import kernel, pipeline, trainer, verify
from landau.services.autodiff import load_checkpoint
from landau.services.config_files import load_config
from landau.services.metrics import read_metrics_csv
from landau.services.trainer import TrainingHistory, build_models
from landau.storage import LOCK_NAME, MANIFEST_NAME, RunStore, list_runs, read_manifest, verify_manifest

SMALL_GRID = "-2.5:2.5:20,-2.5:2.5:20"


def _reference_config(**extra):
    overrides = {
        "stepping.n_particles": "30", "stepping.dt": "0.05", "snapshot_times": "0.05,0.1", "grid": SMALL_GRID,
    }
    overrides.update(extra)
    return load_config(preset="reference-bkw2d", overrides=overrides)


def _train_config(**extra):
    overrides = {
        "train.epochs": "2", "train.n_particles": "10", "train.n_times": "2",
        "train.flow.trunk": "8,1", "train.score.trunk": "8,1",
        "snapshot_times": "1.0", "grid": SMALL_GRID, "eval_particles": "20", "kde_samples": "50",
        "certificate_particles": "10", "certificate_points": "2",
    }
    overrides.update(extra)
    return load_config(preset="bkw2d-smoke", overrides=overrides)


def _checksums(run_dir):
    return {f.path: f.sha256 for f in read_manifest(run_dir).files}


def test_reference_simulate_writes_checksummed_trajectory(tmp_path):
    out = str(tmp_path / "ref")
    assert pipeline.cmd_simulate(_reference_config(), out) == out
    manifest = read_manifest(out)
    assert manifest.status == "ok"
    assert manifest.command == "simulate"
    assert [f.path for f in manifest.files] == ["trajectory.csv"]
    assert manifest.summary["snapshots"] == 2
    assert manifest.config["solver"] == "reference"
    assert verify_manifest(out) == []
    assert not os.path.exists(os.path.join(out, LOCK_NAME))


def test_rerun_reproduces_the_checksums(tmp_path):
    pipeline.cmd_simulate(_reference_config(), str(tmp_path / "a"))
    pipeline.cmd_simulate(_reference_config(), str(tmp_path / "b"))
    assert _checksums(str(tmp_path / "a")) == _checksums(str(tmp_path / "b"))
    pipeline.cmd_simulate(_reference_config(seed="1"), str(tmp_path / "c"))
    assert _checksums(str(tmp_path / "a")) != _checksums(str(tmp_path / "c"))


def test_tampered_file_is_reported(tmp_path):
    out = str(tmp_path / "ref")
    pipeline.cmd_simulate(_reference_config(), out)
    with open(os.path.join(out, "trajectory.csv"), "a") as f:
        f.write("\n")
    assert verify_manifest(out) == ["trajectory.csv: checksum mismatch"]


def test_no_snapshot_times_leaves_only_a_manifest(tmp_path):
    out = str(tmp_path / "empty")
    pipeline.cmd_simulate(_reference_config(snapshot_times=""), out)
    assert sorted(os.listdir(out)) == [MANIFEST_NAME]
    assert read_manifest(out).files == []
    with pytest.raises(ArtifactError):
        pipeline.cmd_evaluate(_reference_config(), out)


def test_evaluating_the_reference_against_itself(tmp_path):
    out = str(tmp_path / "ref")
    config = _reference_config()
    pipeline.cmd_simulate(config, out)
    metrics_path = pipeline.cmd_evaluate(config, out)
    assert metrics_path == os.path.join(out + "-eval", "metrics.csv")
    records = read_metrics_csv(metrics_path)
    assert [r.t for r in records] == [0.05, 0.1]
    for r in records:
        assert r.err_traj == 0.0
        assert r.rfd == 0.0
        assert r.rel_l2 is not None and r.rel_l2 > 0
        assert r.entropy_proxy <= 0
        assert r.gronwall_rhs is None
    assert read_manifest(out + "-eval").command == "evaluate"


def test_pinnpm_simulate_needs_a_train_run(tmp_path):
    out = str(tmp_path / "sim")
    with pytest.raises(ConfigError):
        pipeline.cmd_simulate(_train_config(), out)
    manifest = read_manifest(out)
    assert manifest.status == "failed"
    assert manifest.failure.startswith("ConfigError")


def test_tiny_train_is_reproducible(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    pipeline.cmd_train(_train_config(), a)
    pipeline.cmd_train(_train_config(), b)
    assert sorted(os.listdir(a)) == ["flow.ckpt", "history.csv", MANIFEST_NAME, "score.ckpt"]
    assert _checksums(a) == _checksums(b)
    assert len(TrainingHistory.from_csv(os.path.join(a, "history.csv"))) == 2
    _, _, meta = load_checkpoint(os.path.join(a, "flow.ckpt"))
    assert meta == {"t0": 0.0, "t1": 5.0, "partial": False, "role": "flow"}
    assert read_manifest(a).summary["epochs"] == 2


def test_pinnpm_pipeline_end_to_end(tmp_path):
    train_dir, sim_dir = str(tmp_path / "train"), str(tmp_path / "sim")
    config = _train_config()
    pipeline.cmd_train(config, train_dir)
    pipeline.cmd_simulate(config, sim_dir, train_run=train_dir)
    metrics_path = pipeline.cmd_evaluate(config, sim_dir, train_run=train_dir)
    (record,) = read_metrics_csv(metrics_path)
    assert record.t == 1.0
    assert record.rel_l2 is not None and record.err_traj is not None and record.rfd is not None
    assert record.w1_coupling_bound * record.w1_coupling_bound == record.E_mse
    eval_dir = os.path.dirname(metrics_path)
    assert os.path.isfile(os.path.join(eval_dir, pipeline.CERTIFICATE_FILE))
    with open(os.path.join(eval_dir, pipeline.CERTIFICATE_FILE)) as f:
        header = f.readline().strip().split(",")
    assert header[0] == "t" and header[-1] == "omitted"
    assert verify_manifest(eval_dir) == []


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ArtifactError):
        pipeline.load_trained(str(tmp_path))
    with pytest.raises(ConfigError):
        pipeline.load_trained(None)


def test_failed_training_keeps_partial_state(monkeypatch, tmp_path):
    config = _train_config()

    def diverge(train_config, case):
        flow, score = build_models(train_config, case)
        error = TrainingDiverged(4, {"loss_total": float("nan")})
        error.partial = (flow, score, TrainingHistory())
        raise error

    monkeypatch.setattr(pipeline, "train", diverge)
    out = str(tmp_path / "bad")
    with pytest.raises(TrainingDiverged):
        pipeline.cmd_train(config, out)
    manifest = read_manifest(out)
    assert manifest.status == "failed"
    assert "step 4" in manifest.failure
    assert load_checkpoint(os.path.join(out, "flow.ckpt"))[2]["partial"] is True
    assert pipeline.load_trained(out)[0].t0 == 0.0


def test_run_store_locking(tmp_path):
    root = str(tmp_path / "run")
    os.makedirs(root)
    open(os.path.join(root, LOCK_NAME), "w").close()
    with pytest.raises(ArtifactError):
        RunStore(root, "simulate", {}, 0).open()
    os.remove(os.path.join(root, LOCK_NAME))

    store = RunStore(root, "simulate", {"seed": "0"}, 0)
    with store:
        with open(store.path("notes.txt"), "w") as f:
            f.write("x")
        store.record("notes.txt", deterministic=False)
        with pytest.raises(ArtifactError):
            store.record("absent.txt")
    assert read_manifest(root).files[0].deterministic is False
    with pytest.raises(ArtifactError):
        store.finish()
    with pytest.raises(ArtifactError):
        RunStore(root, "simulate", {}, 0).open()
    assert list_runs(str(tmp_path)) == ["run"]


def test_corrupt_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(ArtifactError):
        read_manifest(str(tmp_path))


def test_rate_study_command(tmp_path):
    config = load_config(preset="bkw2d-smoke", overrides={
        "rate.n_values": "200,400,800", "rate.replicates": "2", "rate.grid_points": "10",
    })
    out = pipeline.cmd_rate_study(config, str(tmp_path / "rate"))
    assert os.path.isfile(os.path.join(out, "rate_study.json"))
    summary = read_manifest(out).summary
    assert summary["expected"] == pytest.approx(-0.5)
    assert np.isfinite(summary["slope"])


def test_verify_checks_pass():
    results = verify.run_checks()
    assert [r.name for r in results] == list(verify.CHECKS)
    assert all(r.passed for r in results), verify.format_table(results)


def test_hyvarinen_check_runs_through_ism_loss(monkeypatch):
    def broken(score, clouds, tape=None):
        raise ValueError("ism_loss unavailable")

    monkeypatch.setattr(trainer, "ism_loss", broken)
    (result,) = verify.run_checks(["hyvarinen_identity"])
    assert not result.passed
    assert "ism_loss unavailable" in result.detail


def test_verify_catches_a_broken_kernel(monkeypatch):
    real = kernel.collision_matrix
    monkeypatch.setattr(kernel, "collision_matrix", lambda z, cfg: -real(z, cfg))
    (result,) = verify.run_checks(["kernel_identities"])
    assert not result.passed
    assert "PSD" in result.detail
    assert landau_cli.run(["verify", "--check", "kernel_identities", "--threads", "1"]) == 2


def test_cli_exit_codes(tmp_path, capsys):
    assert landau_cli.run(["train", "--preset", "no-such-preset", "--out", str(tmp_path / "x")]) == 1
    assert "unknown preset" in capsys.readouterr().err
    assert landau_cli.run(["simulate", "--out", str(tmp_path / "y")]) == 1
    out = str(tmp_path / "ref")
    config = tmp_path / "small.cfg"
    config.write_text(f"stepping.n_particles=20\nstepping.dt=0.05\nsnapshot_times=0.05\ngrid={SMALL_GRID}\n")
    args = ["simulate", "--preset", "reference-bkw2d", "--config", str(config), "--out", out, "--threads", "1"]
    assert landau_cli.run(args) == 0
    assert landau_cli.run(args) == 3
    assert landau_cli.run(["evaluate", out, "--preset", "reference-bkw2d", "--config", str(config)]) == 0
