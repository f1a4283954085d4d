import json

import numpy as np
import pytest
import torch
from PIL import Image

from dfquant.cli import main
from dfquant.modelkit import build_generator, load_container, load_generator
from dfquant.report import SweepSpec, dump_synthetic_grid, read_manifest, to_uint8, verify_manifest
from dfquant.stats import class_diversity

TINY = ["--schedule.total-epochs", "2", "--schedule.warmup-epochs", "1", "--schedule.steps-per-epoch", "2",
        "--schedule.batch-size", "20", "--fda.init-batches", "1", "--schedule.probe-per-class", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    args = ["--workdir", str(w)]
    assert main(["gen-data", *args, "--data.samples-per-class", "50"]) == 0
    assert main(["train-teacher", *args, "--teacher.epochs", "2"]) == 0
    assert main(["dfq-run", *args, *TINY]) == 0
    return w


def test_pipeline_artifacts(workdir, capsys):
    run = workdir / "runs" / "full-seed0"
    for name in ("metrics.csv", "report.json", "state.ckpt", "generator.ckpt", "student.ckpt"):
        assert (run / name).exists()
    commands = [e["command"] for e in read_manifest(workdir)]
    assert commands == ["gen-data", "train-teacher", "dfq-run"]
    assert verify_manifest(workdir) == []
    assert main(["eval", str(run / "student.ckpt"), "--workdir", str(workdir)]) == 0
    assert main(["eval", str(workdir / "teacher.ckpt"), "--workdir", str(workdir)]) == 0
    out = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert 0 <= out[-1]["accuracy"] <= 1


def test_quantize_baseline(workdir, capsys):
    assert main(["quantize", "--workdir", str(workdir), *TINY]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(res) == {"teacher_acc", "quantized_acc"}
    assert (workdir / "quantized" / "student.ckpt").exists()


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    missing = tmp_path / "nothing.ckpt"
    assert main(["eval", str(missing), "--workdir", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["dfq-run", "--workdir", str(tmp_path)]) == 2
    assert "teacher.ckpt" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--workdir", str(tmp_path), "--fda.beta-fd", "1.5", "--loss.alpha1", "-1"]) == 2
    err = capsys.readouterr().err
    assert "fda.beta_fd" in err and "loss.alpha1" in err


def test_seed_from_environment(workdir, monkeypatch):
    monkeypatch.setenv("DFQ_SEED", "5")
    assert main(["dfq-run", "--workdir", str(workdir), *TINY, "--schedule.total-epochs", "1"]) == 0
    assert (workdir / "runs" / "full-seed5" / "report.json").exists()
    assert read_manifest(workdir)[-1]["seed"] == 5


def test_report_is_idempotent(workdir):
    run = workdir / "runs" / "full-seed0"
    state_before = (run / "state.ckpt").read_bytes()
    assert main(["report", "--workdir", str(workdir), str(run)]) == 0
    first = {n: (run / n).read_bytes() for n in ("report.md", "curves.png", "grid.png")}
    manifest = (workdir / "manifest.jsonl").read_text()
    assert main(["report", "--workdir", str(workdir), str(run)]) == 0
    assert first == {n: (run / n).read_bytes() for n in first}
    assert (workdir / "manifest.jsonl").read_text() == manifest
    assert (run / "state.ckpt").read_bytes() == state_before
    assert "Run report" in first["report.md"].decode()


def test_sweep_single_value(workdir, capsys):
    assert main(["sweep", "--workdir", str(workdir), "--param", "beta_fd", "--values", "0.2", *TINY]) == 0
    table = (workdir / "sweep-beta_fd" / "sweep.md").read_text().strip().splitlines()
    assert len(table) == 3
    entry = read_manifest(workdir)[-1]
    assert entry["command"] == "sweep" and "sweep-beta_fd/sweep.png" in entry["outputs"]
    Image.open(workdir / "sweep-beta_fd" / "sweep.png").verify()
    with pytest.raises(ValueError):
        SweepSpec("beta_fd", (1.5,)).validate()
    with pytest.raises(ValueError):
        SweepSpec("gamma", (1.0,)).validate()


def test_ablate_emits_four_rows(workdir, capsys):
    assert main(["ablate", "--workdir", str(workdir), "--seeds", "0", *TINY, "--schedule.total-epochs", "1"]) == 0
    table = (workdir / "ablation" / "ablation.md").read_text().strip().splitlines()
    assert [line.split("|")[1].strip() for line in table[2:]] == ["full", "no_DE", "no_EMA", "neither"]


class TestGrid:
    def test_shape_and_determinism(self, tmp_path):
        g = build_generator(4, seed=0, noise_dim=8, width=4, image_size=(8, 8, 3))
        tiles = dump_synthetic_grid(g, tmp_path / "a.png", k=5, seed=3, pad=2)
        dump_synthetic_grid(g, tmp_path / "b.png", k=5, seed=3, pad=2)
        assert tiles.shape == (4, 5, 8, 8, 3)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        img = np.asarray(Image.open(tmp_path / "a.png"))
        assert img.shape == (4 * 10 + 2, 5 * 10 + 2, 3)

    def test_more_varied_than_collapsed_stub(self, workdir, tmp_path):
        g = load_generator(load_container(workdir / "runs" / "full-seed0" / "generator.ckpt"))
        tiles = dump_synthetic_grid(g, tmp_path / "g.png", k=6, seed=1)
        n_c = g.num_classes
        labels = torch.arange(n_c).repeat_interleave(6)
        pixels = torch.from_numpy(tiles.reshape(n_c * 6, -1).astype(np.float64))
        # stub: every sample of a class is the same image
        collapsed = to_uint8(torch.linspace(-1, 1, n_c).view(n_c, 1, 1, 1).expand(n_c, 3, 32, 32).repeat_interleave(6, 0))
        stub = torch.from_numpy(collapsed.reshape(n_c * 6, -1).astype(np.float64))
        assert class_diversity(stub, labels) == 0.0
        assert class_diversity(pixels, labels) > 0.0
