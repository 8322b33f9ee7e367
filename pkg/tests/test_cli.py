import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from hvp.cli import main
from hvp.shapes_world import read_dataset, write_dataset
from hvp.trainer import load_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


def usage_exit(*argv):
    with pytest.raises(SystemExit) as info:
        run(*argv)
    return info.value.code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--preset", "tiny", "--out", root / "d.bin") == 0
    assert run("gen-data", "--preset", "tiny", "--test", "--out", root / "t.bin") == 0
    assert run("train", "--preset", "tiny", "--data", root / "d.bin", "--regime", "epva", "--steps", 3,
               "--out", root / "epva") == 0
    assert run("train", "--preset", "tiny", "--data", root / "d.bin", "--regime", "e2e", "--steps", 2,
               "--out", root / "e2e") == 0
    return root


def test_gen_data_outputs(workspace, tmp_path):
    ds = read_dataset(workspace / "d.bin")
    assert len(ds) == 8 and ds.frames.shape[1:] == (12, 16, 16, 3)
    summary = json.loads((workspace / "d.summary.json").read_text())
    assert summary["n"] == 8 and summary["T"] == 12 and summary["seed"] == 1 and len(summary["palette"]) == 6
    cfg = json.loads((workspace / "d.run_config.json").read_text())
    assert cfg["preset"] == "tiny" and cfg["net"]["d"] == 4
    test = read_dataset(workspace / "t.bin")
    assert len(test) == 6 and test.frames.shape[1] == 4
    assert run("gen-data", "--preset", "tiny", "--out", tmp_path / "again.bin") == 0
    assert (tmp_path / "again.bin").read_bytes() == (workspace / "d.bin").read_bytes()


def test_gen_data_usage_errors(tmp_path):
    assert usage_exit("gen-data", "--n", 0, "--out", tmp_path / "x.bin") == 2
    assert usage_exit("gen-data", "--preset", "nope") == 2
    assert not (tmp_path / "x.bin").exists()


def test_train_outputs(workspace):
    run_dir = workspace / "epva"
    assert json.loads((run_dir / "manifest.json").read_text())["step"] == 3
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 3
    assert (run_dir / "loss_curves.png").stat().st_size > 0
    cfg = json.loads((run_dir / "run_config.json").read_text())
    assert cfg["training"]["regime"] == "epva" and cfg["training"]["steps"] == 3


def test_train_errors(workspace, tmp_path):
    assert usage_exit("train", "--data", workspace / "d.bin", "--regime", "vae") == 2
    assert run("train", "--preset", "tiny", "--data", tmp_path / "missing.bin", "--out", tmp_path / "r") == 1
    assert run("train", "--preset", "tiny", "--data", workspace / "d.bin", "--regime", "epva_adversarial",
               "--init", tmp_path / "no_ckpt", "--out", tmp_path / "r") == 1


def test_config_file_precedence(workspace, tmp_path):
    doc = {"preset": "tiny", "training": {"steps": 7, "lr": 5e-4}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert run("train", "--config", tmp_path / "c.json", "--data", workspace / "d.bin", "--steps", 2,
               "--out", tmp_path / "r") == 0
    cfg = json.loads((tmp_path / "r" / "run_config.json").read_text())
    assert cfg["training"]["steps"] == 2 and cfg["training"]["lr"] == 5e-4
    (tmp_path / "bad.json").write_text(json.dumps({"preset": "tiny", "training": {"stepz": 2}}))
    assert run("train", "--config", tmp_path / "bad.json", "--data", workspace / "d.bin", "--out", tmp_path / "b") == 1


def test_adversarial_warm_start_and_noise_seeds(workspace, tmp_path):
    assert run("train", "--preset", "tiny", "--data", workspace / "d.bin", "--regime", "epva_adversarial",
               "--steps", 2, "--init", workspace / "epva", "--out", tmp_path / "adv") == 0
    ck = load_checkpoint(tmp_path / "adv")
    assert ck.critic is not None
    assert ck.training_config.init_from_checkpoint == str(workspace / "epva")
    assert ck.net_spec.noise_dim == 8
    outs = []
    for seed in (0, 1):
        assert run("rollout", "--ckpt", tmp_path / "adv", "--data", workspace / "t.bin", "--horizon", 12,
                   "--noise-seed", seed, "--out", tmp_path / f"roll{seed}") == 0
        outs.append(np.load(tmp_path / f"roll{seed}" / "rollout.npz")["frames"])
    assert np.abs(outs[0] - outs[1]).max() > 0


def test_rollout_artifacts(workspace, tmp_path):
    out = tmp_path / "roll"
    assert run("rollout", "--ckpt", workspace / "epva", "--horizon", 30, "--out", out) == 0
    data = np.load(out / "rollout.npz")
    assert data["frames"].shape == (30, 16, 16, 3) and data["masks"].shape == (30, 16, 16)
    for name in ("rollout.gif", "mask.gif"):
        # identical consecutive frames are merged by the GIF writer, so check playback time
        with Image.open(out / name) as gif:
            total = 0
            for k in range(gif.n_frames):
                gif.seek(k)
                total += gif.info["duration"]
        assert total == 30 * 100
    assert (out / "frames.png").exists() and (out / "masks.png").exists()
    assert json.loads((out / "run_config.json").read_text())["horizon"] == 30


def test_rollout_errors(workspace, tmp_path):
    assert run("rollout", "--ckpt", tmp_path / "missing", "--out", tmp_path / "o") == 1
    assert run("rollout", "--ckpt", workspace / "epva", "--data", workspace / "t.bin", "--index", 99,
               "--out", tmp_path / "o") == 1


def test_eval_oracle_prints_perfect_scores(workspace, tmp_path, capsys):
    assert run("eval", "--preset", "tiny", "--oracle", "--data", workspace / "t.bin", "--out", tmp_path / "ev") == 0
    row = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("oracle"))
    assert row.split()[1:] == ["100.0%", "0.0%", "0.0%"]


def test_eval_two_checkpoints_share_a_table(workspace, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run("eval", "--preset", "tiny", "--ckpt", workspace / "epva", "--ckpt", workspace / "e2e",
               "--data", workspace / "t.bin", "--out", out) == 0
    printed = capsys.readouterr().out
    assert "(epva)" in printed and "(e2e)" in printed
    report = json.loads((out / "report_epva.json").read_text())
    assert report["horizon"] == 24 and report["window"] == [20, 24]
    assert abs(sum(report["rates"].values()) - 1.0) < 1e-9
    for name in ("report_e2e.json", "report_e2e_curves.csv", "summary.txt", "horizon_curves.png",
                 "outcomes.png", "run_config.json"):
        assert (out / name).exists()


def test_eval_errors(workspace, tmp_path):
    assert run("eval", "--preset", "tiny", "--ckpt", tmp_path / "missing", "--out", tmp_path / "e") == 1
    assert run("eval", "--preset", "tiny", "--out", tmp_path / "e") == 1
    assert run("eval", "--preset", "tiny", "--oracle", "--data", workspace / "t.bin", "--horizon", 10,
               "--window", 5, 11, "--out", tmp_path / "e") == 1


def test_viz(workspace, tmp_path):
    assert run("eval", "--preset", "tiny", "--oracle", "--data", workspace / "t.bin", "--out", tmp_path / "ev") == 0
    assert run("viz", "--run", workspace / "epva", "--report", tmp_path / "ev" / "report_oracle.json",
               "--data", workspace / "d.bin", "--out", tmp_path / "viz") == 0
    for name in ("loss_epva.png", "horizon_curves.png", "outcomes.png", "dataset_samples.png", "run_config.json"):
        assert (tmp_path / "viz" / name).exists()
    assert run("viz", "--out", tmp_path / "viz2") == 1


def test_nan_data_exits_with_snapshot(workspace, tmp_path, capsys):
    ds = read_dataset(workspace / "d.bin")
    ds.frames = ds.frames.copy()
    ds.frames[:, :, 0, 0, 0] = np.nan
    write_dataset(tmp_path / "nan.bin", ds)
    assert run("train", "--preset", "tiny", "--data", tmp_path / "nan.bin", "--out", tmp_path / "r") == 1
    err = capsys.readouterr().err
    assert "diverged" in err and str(tmp_path / "r" / "diverged_step1.json") in err
    assert (tmp_path / "r" / "diverged_step1.json").exists()


def test_default_output_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("HVP_OUT_DIR", str(tmp_path / "root"))
    assert run("gen-data", "--preset", "tiny", "--n", 2) == 0
    assert (tmp_path / "root" / "data.bin").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hvp", "train", "--regime", "bogus", "--data", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "hvp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
