import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rmprobe import pipeline
from rmprobe.cli import main
from rmprobe.datagen import read_csv
from rmprobe.encoders import load_model
from rmprobe.errors import ConfigError
from rmprobe.trajectories import TrajectorySet, read_trajectories, write_trajectories


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def blobs(tmp_path):
    path = tmp_path / "d.csv"
    assert run("gen-data", "--kind", "blobs", "--dim", 16, "--classes", 4, "--n-per-class", 20,
               "--seed", 1, "--out", path, "-q") == 0
    return path


@pytest.fixture
def trained(tmp_path, blobs):
    model = tmp_path / "m.rmen"
    assert run("train", "--method", "ntxent", "--dim", 32, "--opt", "adam", "--seed", 1, "--data", blobs,
               "--out", model, "--epochs", 3, "--hidden", "16", "-q") == 0
    return model


def test_gen_data_is_parseable_and_deterministic(tmp_path, blobs):
    d = read_csv(blobs)
    assert d.inputs.shape == (80, 16) and set(d.labels) == {0, 1, 2, 3}
    again = tmp_path / "again.csv"
    run("gen-data", "--kind", "blobs", "--dim", 16, "--classes", 4, "--n-per-class", 20, "--seed", 1,
        "--out", again, "-q")
    assert again.read_bytes() == blobs.read_bytes()


def test_gen_data_idx(tmp_path):
    imgs, labels = tmp_path / "i.idx", tmp_path / "l.idx"
    assert run("gen-data", "--kind", "rings", "--dim", 16, "--format", "idx", "--out", imgs,
               "--labels-out", labels, "-q") == 0
    assert imgs.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert run("gen-data", "--kind", "rings", "--dim", 16, "--format", "idx", "--out", imgs, "-q") == 1


def test_invalid_kind_is_usage_error(tmp_path, capsys):
    assert run("gen-data", "--kind", "spirals", "--dim", 4, "--out", tmp_path / "x.csv") == 1
    assert "usage" in capsys.readouterr().err


def test_train_writes_valid_model(trained):
    assert trained.read_bytes()[:4] == b"RMEN"
    m = load_model(trained)
    assert m.spec.embedding_dim == 32 and not m.spec.has_head
    meta = json.loads((trained.parent / "m.rmen.json").read_text())
    assert meta["method"] == "ntxent" and len(meta["loss_history"]) == 3


def test_train_cross_entropy_without_labels(tmp_path, capsys):
    path = tmp_path / "u.csv"
    path.write_text("x0,x1\n0.1,0.2\n0.3,0.4\n")
    assert run("train", "--method", "cross_entropy", "--dim", 2, "--data", path, "--out", tmp_path / "m.rmen") == 2
    assert "labeled" in capsys.readouterr().err


def test_train_logs_one_line_per_epoch(tmp_path, blobs):
    log = tmp_path / "train.log"
    run("train", "--method", "cross_entropy", "--dim", 8, "--data", blobs, "--out", tmp_path / "c.rmen",
        "--epochs", 4, "--hidden", "8", "--log-file", log, "-q")
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 4 and all(line.startswith(f"epoch {k + 1}/4") for k, line in enumerate(lines))


def test_train_loss_lines_on_stderr(tmp_path, blobs):
    proc = subprocess.run([sys.executable, "-m", "rmprobe", "train", "--method", "triplet_ss", "--dim", "4",
                           "--data", str(blobs), "--out", str(tmp_path / "s.rmen"), "--epochs", "3",
                           "--hidden", "8"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert sum(line.startswith("epoch ") for line in proc.stderr.splitlines()) == 3


def test_alter_and_measure(tmp_path, blobs, trained):
    traj, out = tmp_path / "t.rmtj", tmp_path / "metrics.json"
    assert run("alter", "--kind", "noise", "--steps", 100, "--seed", 7, "--model", trained, "--data", blobs,
               "--out", traj, "--samples", 10, "-q") == 0
    t = read_trajectories(traj)
    assert t.points.shape == (10, 101, 32) and t.metadata["method"] == "ntxent"
    assert run("measure", "--traj", traj, "--out", out, "--series", tmp_path / "s.csv", "-q") == 0
    doc = json.loads(out.read_text())
    assert {"D", "D_RC", "P_RC", "RMQM"} <= set(doc) and doc["normalized"] is True
    raw = tmp_path / "raw.json"
    assert run("measure", "--traj", traj, "--out", raw, "--raw", "--prefactor", "J-1", "-q") == 0
    assert json.loads(raw.read_text())["normalized"] is False


def test_pgd_defaults(tmp_path, blobs, trained):
    traj = tmp_path / "p.rmtj"
    assert run("alter", "--kind", "pgd", "--model", trained, "--data", blobs, "--samples", 4, "--out", traj,
               "-q") == 0
    t = read_trajectories(traj)
    assert t.steps == 30
    # the embedding path moves; inputs moved by at most 30 * 2/255 per coordinate
    assert np.any(t.points[:, -1] != t.points[:, 0])


def test_measure_J1_is_an_error(tmp_path, capsys):
    path = tmp_path / "short.rmtj"
    write_trajectories(TrajectorySet(np.random.default_rng(0).normal(size=(3, 2, 4))), path)
    assert run("measure", "--traj", path, "--out", tmp_path / "m.json") == 2
    assert "J >= 2" in capsys.readouterr().err


def test_measure_corrupt_file(tmp_path):
    path = tmp_path / "bad.rmtj"
    path.write_bytes(b"NOPE" + bytes(40))
    assert run("measure", "--traj", path, "--out", tmp_path / "m.json", "-q") == 2


def test_measure_degenerate_is_numeric_error(tmp_path):
    path = tmp_path / "flat.rmtj"
    write_trajectories(TrajectorySet(np.ones((2, 5, 3))), path)
    assert run("measure", "--traj", path, "--out", tmp_path / "m.json", "-q") == 3


def test_eval_and_report(tmp_path, blobs, trained):
    rings = tmp_path / "rings.csv"
    run("gen-data", "--kind", "rings", "--dim", 16, "--classes", 3, "--n-per-class", 20, "--out", rings, "-q")
    ev = tmp_path / "evals"
    ev.mkdir()
    assert run("eval", "--model", trained, "--task", rings, "--out", ev / "a.json", "-q") == 0
    doc = json.loads((ev / "a.json").read_text())
    assert 0 <= doc["raw_accuracy"] <= 1 and doc["encoder_id"] == "m" and doc["task_id"] == "rings"

    mdir = tmp_path / "metrics"
    mdir.mkdir()
    traj = tmp_path / "t.rmtj"
    run("alter", "--model", trained, "--data", blobs, "--steps", 10, "--samples", 5, "--out", traj, "-q")
    run("measure", "--traj", traj, "--out", mdir / "m.noise.json", "-q")
    assert run("report", "--metrics", mdir, "--evals", ev, "--out", tmp_path / "r.json") == 2

    # a second encoder completes the cohort
    m2 = tmp_path / "m2.rmen"
    run("train", "--method", "ntxent", "--dim", 16, "--seed", 2, "--data", blobs, "--out", m2, "--epochs", 2,
        "--hidden", "16", "-q")
    run("alter", "--model", m2, "--data", blobs, "--steps", 10, "--samples", 5, "--out", traj, "-q")
    run("measure", "--traj", traj, "--out", mdir / "m2.noise.json", "-q")
    run("eval", "--model", m2, "--task", rings, "--out", ev / "b.json", "-q")
    assert run("report", "--metrics", mdir, "--evals", ev, "--out", tmp_path / "r.json",
               "--scatter", tmp_path / "s.csv", "-q") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"rmqm_performance", "dimension_performance", "dimension_rmqm"} <= set(rep)


def test_report_cohort_too_small_message(tmp_path, capsys):
    (tmp_path / "m").mkdir()
    (tmp_path / "e").mkdir()
    assert run("report", "--metrics", tmp_path / "m", "--evals", tmp_path / "e", "--out", tmp_path / "r.json") == 2
    assert "cohort too small" in capsys.readouterr().err


# ---------------------------------------------------------------- grid

SMALL = """\
# tiny grid for tests
methods = cross_entropy
methods = ntxent
dims = 4
dims = 8
optimizers = adam
seeds = 1
input_dim = 8
n_per_class = 12
epochs = 2
hidden = 8
measure_samples = 6
noise_steps = 6
task_n_per_class = 10
"""


def _snapshot(root):
    return {p: p.stat().st_mtime_ns for p in sorted(root.rglob("*")) if p.is_file()}


def test_grid_counts_and_resume(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert run("grid", "--config", cfg, "--out", out, "-q") == 0
    assert len(list((out / "models").glob("*.rmen"))) == 4
    assert len(list((out / "metrics").glob("*.json"))) == 4
    assert (out / "report.json").exists()
    assert len(list((out / "evals").glob("*.json"))) == 8

    before = _snapshot(out)
    assert run("grid", "--config", cfg, "--out", out, "-q") == 0
    after = _snapshot(out)
    skipped = {p for p in before if p.parent.name in ("models", "trajectories", "metrics", "evals", "data")}
    assert all(before[p] == after[p] for p in skipped)

    victim = out / "metrics" / "ntxent-d8-adam-s1.noise.json"
    content = victim.read_bytes()
    victim.unlink()
    run("grid", "--config", cfg, "--out", out, "-q")
    assert victim.read_bytes() == content
    assert (out / "models" / "ntxent-d8-adam-s1.rmen").stat().st_mtime_ns == before[out / "models" / "ntxent-d8-adam-s1.rmen"]


def test_grid_is_deterministic_and_parallel_safe(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text(SMALL)
    run("grid", "--config", cfg, "--out", tmp_path / "a", "-q")
    run("grid", "--config", cfg, "--out", tmp_path / "b", "--workers", 2, "-q")
    for sub in ("models", "metrics", "evals"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert ra == rb


def test_grid_overrides_replace_lists(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text(SMALL)
    c = pipeline.load_config(str(cfg), ["dims=16", "epochs=5"])
    assert c.dims == [16] and c.methods == ["cross_entropy", "ntxent"] and c.epochs == 5


@pytest.mark.parametrize("text, where", [
    ("methods = ntxent\nthis line is broken\n", ":2"),
    ("epochs = many\n", "epochs"),
    ("colour = blue\n", "colour"),
    ("methods = softmax\n", "softmax"),
])
def test_grid_config_diagnostics(tmp_path, capsys, text, where):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("grid", "--config", cfg, "--out", tmp_path / "o") == 1
    assert where in capsys.readouterr().err


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv(pipeline.WORKERS_ENV, "3")
    assert pipeline.worker_count(pipeline.GridConfig()) == 3
    assert pipeline.worker_count(pipeline.GridConfig(workers=2)) == 2
    monkeypatch.setenv(pipeline.WORKERS_ENV, "lots")
    with pytest.raises(ConfigError):
        pipeline.worker_count(pipeline.GridConfig())


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rmprobe", "--help"], capture_output=True, text=True,
                          env={**os.environ})
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "alter", "measure", "eval", "report", "grid"):
        assert cmd in proc.stdout
