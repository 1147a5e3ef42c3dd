import json
import logging

import numpy as np
import pytest

from samovar.autodiff import Tensor
from samovar.errors import ConfigError, DivergenceError
from samovar.train_eval import (AdamState, ArrayData, TrainConfig, adamw_step, clip_grad_norm, evaluate,
                                lr_schedule, metrics, next_patch_targets, repeat_last_patch, train)

from conftest import make_model


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.max_epochs, cfg.patience) == (32, 100, 12)
    assert (cfg.lr_warmup_start, cfg.lr_peak, cfg.warmup_epochs) == (6e-5, 6e-4, 5)
    assert cfg.weight_decay == 0.1 and cfg.betas == (0.9, 0.95) and cfg.eps == 1e-8
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1.0})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adamw_zero_grads():
    w = np.random.default_rng(0).standard_normal((3, 3))
    p = {"W": Tensor(w.copy())}
    adamw_step(p, {"W": np.zeros((3, 3))}, AdamState(), 1e-3, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["W"].data, w)
    adamw_step(p, {"W": np.zeros((3, 3))}, AdamState(), 1e-3, TrainConfig(weight_decay=0.1))
    np.testing.assert_allclose(p["W"].data, w * (1 - 1e-4), rtol=1e-15)


def test_adamw_skips_gains_from_decay():
    p = {"g": Tensor(np.ones(4))}
    adamw_step(p, {"g": np.zeros(4)}, AdamState(), 1e-3, TrainConfig())
    np.testing.assert_array_equal(p["g"].data, 1.0)


def test_adamw_skips_non_finite(caplog):
    p = {"W": Tensor(np.ones((2, 2)))}
    st = AdamState()
    with caplog.at_level(logging.WARNING):
        ok = adamw_step(p, {"W": np.array([[np.nan, 0], [0, 0]])}, st, 1e-3, TrainConfig())
    assert not ok and st.skipped == 1 and st.step == 0
    np.testing.assert_array_equal(p["W"].data, 1.0)
    assert "non-finite" in caplog.text


def test_adamw_quadratic_converges():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"x": Tensor(np.array([5.0]))}
    st = AdamState()
    for i in range(2000):
        lr = 0.05 * (1 - i / 2000)
        adamw_step(p, {"x": 2 * (p["x"].data - 1.5)}, st, lr, cfg)
    assert abs(p["x"].data[0] - 1.5) < 1e-6


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.0])
    assert clip_grad_norm(g, None) == pytest.approx(1.0, rel=1e-9)


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_schedule(0, 0.0, cfg) == pytest.approx(6e-5, rel=1e-12)
    assert lr_schedule(5, 0.0, cfg) == 6e-4
    assert lr_schedule(100, 0.0, cfg) == 0.0
    assert lr_schedule(2, 0.5, cfg) == pytest.approx(6e-5 + 5.4e-4 * 0.5)
    assert lr_schedule(52, 0.5, cfg) == pytest.approx(3e-4)
    # continuous at the knee
    assert lr_schedule(4, 0.999999, cfg) == pytest.approx(6e-4, rel=1e-5)


def test_next_patch_targets():
    x = np.arange(6.0).reshape(1, 6, 1)
    y = np.array([[[6.0], [7.0]]])
    t = next_patch_targets(x, y, 2)
    np.testing.assert_array_equal(t[0, 0], [[2, 3], [4, 5], [6, 7]])


def test_metrics_and_baselines():
    rng = np.random.default_rng(1)
    tgt = rng.standard_normal((5000, 2, 3))
    mse, _ = metrics(np.zeros_like(tgt), tgt)
    assert mse == pytest.approx(1.0, abs=0.05)
    assert metrics(tgt, tgt) == (0.0, 0.0)
    x = np.arange(12.0).reshape(1, 6, 2)
    np.testing.assert_array_equal(repeat_last_patch(x, 2), x[:, 4:])


def test_evaluate_perfect_model():
    m = make_model(C=1, L_I=4, L_P=1, perturb=0.0)
    x = np.random.default_rng(2).standard_normal((3, 4, 1))
    y = m.predict_last(x)
    assert evaluate(m, x, y, L_P=1) == (0.0, 0.0)
    with pytest.raises(ConfigError):
        evaluate(m, x, y, L_P=2)


def _data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4, 1))
    y = 0.5 * x[:, -1:, :] + 0.1 * rng.standard_normal((n, 1, 1))
    return ArrayData(x[:48], y[:48], x[48:], y[48:], seed=seed)


def _cfg(**kw):
    base = dict(batch_size=16, max_epochs=4, warmup_epochs=1, precision="float64", lr_peak=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic_and_logs(tmp_path):
    runs = []
    for k in range(2):
        m = make_model(C=1, L_I=4, perturb=0.0)
        log_path = tmp_path / f"m{k}.jsonl"
        res = train(m, _data(), _cfg(), log_path=log_path)
        lines = [json.loads(s) for s in log_path.read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [0, 1, 2, 3]
        for r in lines:
            r.pop("wall_seconds")
        runs.append((lines, res))
    assert runs[0][0] == runs[1][0]
    res = runs[0][1]
    assert res.best_val_mse == min(r.val_mse for r in res.metrics)


def test_best_weights_restored():
    m = make_model(C=1, L_I=4, perturb=0.0)
    data = _data()
    res = train(m, data, _cfg())
    assert evaluate(m, *data.val())[0] == pytest.approx(res.best_val_mse, rel=1e-12)


def test_patience_stops_early():
    m = make_model(C=1, L_I=4, perturb=0.0)
    # zero learning rate: validation never improves after the first epoch
    res = train(m, _data(), _cfg(max_epochs=20, lr_peak=0.0, lr_warmup_start=0.0, patience=2))
    assert res.stopped_early and len(res.metrics) == 3 and res.best_epoch == 0


def test_divergence_raises():
    m = make_model(C=1, L_I=4, perturb=0.0)
    with pytest.raises(DivergenceError, match="diverged"):
        train(m, _data(), _cfg(divergence_loss=1e-6))


def test_precision_mismatch():
    with pytest.raises(ConfigError):
        train(make_model(C=1, L_I=4), _data(), _cfg(precision="float32"))


def test_time_limit_stops_after_epoch():
    m = make_model(C=1, L_I=4, perturb=0.0)
    res = train(m, _data(), _cfg(max_epochs=10, time_limit=0.0))
    assert res.stopped_early and len(res.metrics) == 1
