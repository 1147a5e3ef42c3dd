import csv
import json

import numpy as np
import pytest

from samovar.errors import ConfigError
from samovar.synth_bench import SynthConfig, example_rng, export_csv, make_arrays, make_examples, make_split
from samovar.var_math import simulate


def small(**kw):
    return SynthConfig(**{"examples_per_epoch": 16, "val_examples": 8, **kw})


def test_defaults():
    cfg = SynthConfig()
    assert (cfg.C, cfg.L_I, cfg.L_P) == (2, 64, 1)
    assert cfg.train_lags == (1, 2, 3) and cfg.train_range == (-0.5, 0.5)
    assert cfg.val_lags == (3, 4, 5) and cfg.val_range == (-0.25, 0.25)
    assert cfg.examples_per_epoch == 8192


def test_invalid_configs():
    with pytest.raises(ConfigError):
        SynthConfig(L_I=10, L_P=3)
    with pytest.raises(ConfigError):
        SynthConfig(train_range=(0.5, -0.5))
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("split,lags,bound", [("train", {1, 2, 3}, 0.5), ("val", {3, 4, 5}, 0.25)])
def test_split_distributions(split, lags, bound):
    for ex in make_split(small(), split, 20):
        assert ex.process.p in lags
        assert np.all(np.abs(ex.process.coeffs) <= bound)
        assert ex.input.shape == (64, 2) and ex.target.shape == (1, 2)
        assert ex.split == split


def test_deterministic_and_order_independent():
    cfg = small()
    a = make_examples(cfg, "train", [3, 7])
    b = make_examples(cfg, "train", [7, 3])
    np.testing.assert_array_equal(a[0].input, b[1].input)
    np.testing.assert_array_equal(a[1].target, b[0].target)
    x1, y1 = make_arrays(cfg, "val")
    x2, y2 = make_arrays(cfg, "val")
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(y1, y2)


def test_target_is_continuation_of_input():
    cfg = small()
    for ex in make_examples(cfg, "train", range(5)):
        full = simulate(ex.process, cfg.L_I + cfg.L_P, burn_in=cfg.burn_in, noise=ex.noise)
        np.testing.assert_allclose(full[:cfg.L_I], ex.input, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(full[cfg.L_I:], ex.target, rtol=1e-12, atol=1e-12)


def test_seed_changes_data():
    a = make_examples(small(seed=0), "train", [0])[0]
    b = make_examples(small(seed=1), "train", [0])[0]
    assert not np.array_equal(a.input, b.input)
    assert example_rng(small(), "train", 0).random() != example_rng(small(), "val", 0).random()


def test_export_csv(tmp_path):
    exs = list(make_split(small(), "train", 3))
    export_csv(exs, tmp_path / "t.csv", tmp_path / "p.json")
    with open(tmp_path / "t.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["example", "step", "ch0", "ch1"]
    assert len(rows) == 1 + 3 * 65
    assert float(rows[1][2]) == exs[0].input[0, 0]
    meta = json.loads((tmp_path / "p.json").read_text())
    assert [m["index"] for m in meta] == [0, 1, 2]
    np.testing.assert_array_equal(np.array(meta[1]["coeffs"]), exs[1].process.coeffs)
