import csv
import json

import numpy as np
import pytest

from samovar import cli
from samovar.ingest import write_csv

TINY = ["--examples", "32", "--val-examples", "16", "--L-I", "8", "--hidden", "8", "--heads", "2",
        "--layers", "2", "--precision", "float64"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--examples", 6, "--val-examples", 3, "--seed", 1) == 0
    for f in ("train.csv", "val.csv", "processes_train.json", "processes_val.json", "resolved_config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with open(tmp_path / "a" / "train.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert len(header) >= 2
    procs = json.loads((tmp_path / "a" / "processes_val.json").read_text())
    assert len(procs) == 3


def test_invalid_range_writes_nothing(tmp_path, capsys):
    out = tmp_path / "bad"
    assert run("synth", "--out", out, "--train-range", 0.5, -0.5) == 2
    assert not out.exists()
    assert "lo <= hi" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert run("synth", "--config", p, "--out", tmp_path / "o") == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"train": {"batch_size": 8}, "synth": {"C": 2}}))
    assert run("train", "--config", cfg, "--out", out, "--epochs", 2, *TINY) == 0
    return out


def test_train_outputs(trained):
    resolved = json.loads((trained / "resolved_config.json").read_text())
    assert resolved["train"]["batch_size"] == 8 and resolved["train"]["max_epochs"] == 2
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in lines] == [0, 1]
    with open(trained / "loss_curve.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_mse", "val_mse", "val_mae", "lr"] and len(rows) == 2
    dat = np.loadtxt(trained / "loss_curve.dat")
    assert dat.shape == (2, 3)
    side = json.loads((trained / "model.smvw.json").read_text())
    assert side["model"]["variant"] == "samovar"


def test_eval_and_baseline(trained, tmp_path):
    assert run("eval", "--checkpoint", trained / "model.smvw", "--out", tmp_path, "--split", "val",
               "--baseline") == 0
    res = json.loads((tmp_path / "eval_val.json").read_text())
    assert res["windows"] == 16 and res["mse"] > 0 and "repeat_last" in res
    best = min(json.loads(s)["val_mse"] for s in (trained / "metrics.jsonl").read_text().splitlines())
    # checkpoint stores float32 weights
    assert res["mse"] == pytest.approx(best, rel=1e-4)


def test_interpret_exports(trained, tmp_path):
    assert run("interpret", "--checkpoint", trained / "model.smvw", "--out", tmp_path, "--t", 15,
               "--j", 13) == 0
    heat = json.loads((tmp_path / "heatmap.json").read_text())
    assert np.array(heat["data"]).shape == (8, 8, 2, 2)
    dot = (tmp_path / "paths_ch0_13_to_15.dot").read_text()
    assert dot.startswith("digraph") and 'label="15:en"' in dot
    with open(tmp_path / "C_ch1_15_13.csv") as fh:
        assert json.loads(fh.readline()[2:])["t"] == 15
    assert len(json.loads((tmp_path / "pruning_stats.json").read_text())) == 2
    assert run("interpret", "--checkpoint", trained / "model.smvw", "--out", tmp_path,
               "--window-index", 99) == 2


def test_missing_checkpoint(tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "none.smvw") == 3
    assert "checkpoint not found" in capsys.readouterr().err


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMOVAR_OUT", str(tmp_path / "env"))
    assert run("synth", "--examples", 2, "--val-examples", 2) == 0
    assert (tmp_path / "env" / "train.csv").exists()


def test_train_on_csv_and_with_wk(tmp_path):
    vals = np.cumsum(np.random.default_rng(0).standard_normal((120, 2)), axis=0)
    data = tmp_path / "d.csv"
    write_csv(data, vals)
    out = tmp_path / "o"
    assert run("train", "--data", data, "--L-I", 8, "--L-P", 4, "--epochs", 1, "--hidden", 8, "--heads", 2,
               "--with-wk", "--variant", "samovar", "--out", out) == 0
    assert json.loads((out / "model.smvw.json").read_text())["model"]["use_Wk"] is True
    assert run("eval", "--checkpoint", out / "model.smvw", "--data", data, "--out", out) == 0
    assert json.loads((out / "eval_test.json").read_text())["windows"] == 4


def test_fixedvar_variant(tmp_path):
    assert run("train", "--variant", "fixedvar", "--out", tmp_path, "--epochs", 1, *TINY) == 0
    assert run("interpret", "--checkpoint", tmp_path / "model.smvw", "--out", tmp_path) == 2
