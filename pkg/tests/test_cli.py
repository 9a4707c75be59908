import csv

import numpy as np
import pytest

from cmanet.cli import run
from cmanet.data import read_dataset
from cmanet.export import read_pgm

TINY = """
n_train = 8
n_val = 4
height = 16
width = 16
radius = 3
n_distractors = 1
n_classes = 4
stage_channels = 4, 8, 8
blocks_per_stage = 1
epochs_per_iteration = 1
iteration_count = 1
batch_size = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.cfg").write_text(TINY)
    assert run(["gen-data", "--config", str(d / "c.cfg"), "--seed", "3", "--out", str(d / "data")]) == 0
    assert run(["train", "--config", str(d / "c.cfg"), "--seed", "7", "--dataset", str(d / "data"), "--out", str(d / "run1")]) == 0
    return d


def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "gradcheck" in err


def test_unknown_flag_is_usage_error(capsys):
    assert run(["gradcheck", "--bogus"]) == 2


def test_bad_config_key_is_usage_error(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("nonsense = 1\n")
    assert run(["gradcheck", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "nonsense" in capsys.readouterr().err


def test_gradcheck_all_pass(tmp_path, capsys):
    assert run(["gradcheck", "--seed", "1", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "# cmanet gradcheck seed=1" in out and "seed = 1" in out and "FAIL" not in out
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
    assert rows and all(r["pass"] == "1" for r in rows)


def test_oracle_check(capsys):
    assert run(["oracle-check", "--seed", "2"]) == 0


def test_gen_data_outputs(workdir):
    train = read_dataset(workdir / "data" / "train.cmad")
    val = read_dataset(workdir / "data" / "val.cmad")
    assert len(train) == 8 and len(val) == 4 and train.frames.shape[2:] == (16, 16, 3)


def test_train_is_byte_reproducible(workdir):
    assert run(["train", "--config", str(workdir / "c.cfg"), "--seed", "7", "--dataset", str(workdir / "data"),
                "--out", str(workdir / "run2")]) == 0
    for name in ("model.cmaw", "iter0.cmaw", "iter1.cmaw", "metrics_epochs.csv", "metrics_iterations.csv", "config.cfg"):
        assert (workdir / "run1" / name).read_bytes() == (workdir / "run2" / name).read_bytes(), name


def test_train_metrics(workdir):
    rows = list(csv.DictReader(open(workdir / "run1" / "metrics_iterations.csv")))
    assert [r["iteration"] for r in rows] == ["0", "1"] and rows[1]["trained"] == "rgb"
    epochs = list(csv.DictReader(open(workdir / "run1" / "metrics_epochs.csv")))
    assert [(r["iteration"], r["branch"]) for r in epochs] == [("0", "flow"), ("0", "rgb"), ("1", "rgb")]


def test_eval_and_sweep(workdir, capsys):
    base = ["--config", str(workdir / "c.cfg"), "--dataset", str(workdir / "data"),
            "--checkpoint", str(workdir / "run1" / "model.cmaw"), "--out", str(workdir / "ev")]
    assert run(["eval", *base, "--weights", "5:1", "--segments", "2"]) == 0
    ev = next(csv.DictReader(open(workdir / "ev" / "eval.csv")))
    assert ev["w_rgb"] == "5.0" and ev["w_flow"] == "1.0"
    assert run(["fuse-sweep", *base, "--grid", "5", "--segments", "2"]) == 0
    rows = list(csv.DictReader(open(workdir / "ev" / "fuse_sweep.csv")))
    assert [float(r["w_rgb"]) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert float(rows[-1]["fused_top1"]) == float(ev["rgb_top1"])
    assert float(rows[0]["fused_top1"]) == float(ev["flow_top1"])
    assert run(["eval", *base, "--weights", "oops"]) == 2


def test_attn_map(workdir):
    base = ["--config", str(workdir / "c.cfg"), "--dataset", str(workdir / "data"),
            "--checkpoint", str(workdir / "run1" / "model.cmaw"), "--out", str(workdir / "maps")]
    assert run(["attn-map", *base, "--block", "rgb.cma_s1b0", "--query", "3,4"]) == 0
    img = read_pgm(workdir / "maps" / "attn_rgb.cma_s1b0_3_4.pgm")
    assert img.shape == (16, 16)
    weights = [float(r["weight"]) for r in csv.DictReader(open(workdir / "maps" / "attn_rgb.cma_s1b0_3_4.csv"))]
    assert len(weights) == 16 and abs(sum(weights) - 1.0) <= 1e-9
    assert run(["attn-map", *base, "--block", "rgb.cma_s1b0", "--query", "9,9"]) == 1
    assert run(["attn-map", *base, "--block", "rgb.nope", "--query", "0,0"]) == 1


def test_missing_checkpoint_is_domain_error(workdir):
    assert run(["eval", "--config", str(workdir / "c.cfg"), "--dataset", str(workdir / "data"),
                "--checkpoint", str(workdir / "absent.cmaw")]) == 1
