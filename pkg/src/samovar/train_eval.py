"""Training loop, optimiser, schedule and evaluation metrics."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DivergenceError
from .tokenizer import patchify

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 12
    lr_warmup_start: float = 6e-5
    lr_peak: float = 6e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    divergence_loss: float = 1e4
    seed: int = 0
    precision: str = "float32"
    time_limit: float | None = None  # seconds; checked after each epoch

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ConfigError("warmup_epochs must lie in [0, max_epochs]")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    train_mse: float
    val_mse: float
    val_mae: float
    lr: float
    wall_seconds: float
    skipped_steps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices and embeddings, not to gains and biases."""
    return value.ndim >= 2


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig) -> bool:
    """One in-place AdamW update; returns False (and skips) on non-finite grads."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s; skipping step %d", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay and decays(name, p.data):
            p.data *= (1.0 - lr * cfg.weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)
    return True


def clip_grad_norm(grads: dict, max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


def lr_schedule(epoch: int, step_fraction: float, cfg: TrainConfig) -> float:
    """Linear warm-up from ``lr_warmup_start`` to ``lr_peak``, then linear decay to 0."""
    e = epoch + step_fraction
    if e < cfg.warmup_epochs:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * e / cfg.warmup_epochs
    span = cfg.max_epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr_peak if e <= cfg.max_epochs else 0.0
    return max(0.0, cfg.lr_peak * (cfg.max_epochs - e) / span)


# ---------------------------------------------------------------------------
# data sources


def next_patch_targets(x: np.ndarray, y: np.ndarray, L_P: int) -> np.ndarray:
    """Targets for every token: patch ``i + 1`` of the input followed by ``y``.

    Shapes: ``x`` (B, L_I, C), ``y`` (B, L_P, C) -> (B, C, N, L_P).
    """
    full, _ = patchify(np.concatenate([x, y], axis=1), L_P)
    # left padding of (L_I + L_P) equals that of L_I since L_P divides the extra length
    return full[:, :, 1:, :]


class ArrayData:
    """Fixed window arrays (real data): shuffled each epoch."""

    def __init__(self, train_x, train_y, val_x, val_y, seed: int = 0):
        self.train_x, self.train_y = np.asarray(train_x), np.asarray(train_y)
        self.val_x, self.val_y = np.asarray(val_x), np.asarray(val_y)
        self.seed = seed

    def epoch_batches(self, epoch: int, batch_size: int):
        order = np.random.default_rng([self.seed, 2, epoch]).permutation(len(self.train_x))
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s:s + batch_size])
            yield self.train_x[idx], self.train_y[idx]

    def n_batches(self, batch_size: int) -> int:
        return -(-len(self.train_x) // batch_size)

    def val(self):
        return self.val_x, self.val_y


class SynthData:
    """Synthetic stream: ``examples_per_epoch`` draws per epoch.

    With ``resample`` every epoch draws new processes (indices continue
    across epochs); otherwise each epoch revisits the same pool.
    """

    def __init__(self, synth_cfg, resample: bool = True):
        from .synth_bench import make_examples
        self.cfg = synth_cfg
        self.resample = resample
        self._make = make_examples
        self._val = None

    def epoch_batches(self, epoch: int, batch_size: int):
        E = self.cfg.examples_per_epoch
        base = epoch * E if self.resample else 0
        chunk = max(batch_size, 1024 // batch_size * batch_size)
        for s in range(0, E, chunk):
            exs = self._make(self.cfg, "train", range(base + s, base + min(E, s + chunk)))
            xs = np.stack([e.input for e in exs])
            ys = np.stack([e.target for e in exs])
            for b in range(0, len(exs), batch_size):
                yield xs[b:b + batch_size], ys[b:b + batch_size]

    def n_batches(self, batch_size: int) -> int:
        return -(-self.cfg.examples_per_epoch // batch_size)

    def val(self):
        if self._val is None:
            exs = self._make(self.cfg, "val", range(self.cfg.val_examples))
            self._val = (np.stack([e.input for e in exs]), np.stack([e.target for e in exs]))
        return self._val


# ---------------------------------------------------------------------------
# evaluation


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.predict_last(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[1:])


def metrics(pred: np.ndarray, target: np.ndarray):
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def evaluate(model, inputs: np.ndarray, targets: np.ndarray, L_P: int | None = None,
             batch_size: int = 256):
    """Last-token forecast MSE and MAE over all windows and channels."""
    if L_P is not None and targets.shape[1] != L_P:
        raise ConfigError(f"targets have horizon {targets.shape[1]}, expected {L_P}")
    return metrics(predict(model, inputs, batch_size), targets)


def repeat_last_patch(inputs: np.ndarray, L_P: int) -> np.ndarray:
    """Naive forecast: the final ``L_P`` input steps repeated as the next patch."""
    return np.asarray(inputs)[:, -L_P:, :].copy()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_weights: dict
    metrics: list
    best_epoch: int
    best_val_mse: float
    skipped_steps: int
    stopped_early: bool


def snapshot(model) -> dict:
    return {k: v.data.copy() for k, v in model.w.items()}


def restore(model, weights: dict):
    for k, v in weights.items():
        model.w[k].data[...] = v


def train(model, data, cfg: TrainConfig, log_path=None, on_epoch=None) -> TrainResult:
    """Train with teacher forcing on every token; keep the best-validation weights."""
    if model.cfg.dtype != cfg.precision:
        raise ConfigError(f"model dtype {model.cfg.dtype} differs from training precision {cfg.precision}")
    L_P = model.cfg.L_P
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    params = model.w
    history = []
    best = (math.inf, -1, snapshot(model))
    since_best = 0
    n_batches = data.n_batches(cfg.batch_size)
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    stopped_early = False
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.max_epochs):
            total, count = 0.0, 0
            for b, (x, y) in enumerate(data.epoch_batches(epoch, cfg.batch_size)):
                lr = lr_schedule(epoch, b / n_batches, cfg)
                tgt = Tensor(next_patch_targets(x, y, L_P).astype(model.cfg.np_dtype))
                res = model.forward(x, rng=drop_rng if model.cfg.dropout > 0 else None)
                loss = ad.mse_loss(res.pred, tgt)
                lv = float(loss.data)
                if not math.isfinite(lv) or lv > cfg.divergence_loss:
                    raise DivergenceError(
                        f"training diverged at epoch {epoch} batch {b}: loss {lv:.4g} "
                        f"(limit {cfg.divergence_loss:g}, lr {lr:.3g})")
                ad.zero_grad(params.values())
                loss.backward()
                grads = {k: p.grad for k, p in params.items()}
                clip_grad_norm(grads, cfg.clip_norm)
                adamw_step(params, grads, state, lr, cfg)
                total += lv * len(x)
                count += len(x)
            vx, vy = data.val()
            val_mse, val_mae = evaluate(model, vx, vy)
            rec = MetricsRecord(epoch, total / max(count, 1), val_mse, val_mae,
                                lr_schedule(epoch + 1, 0.0, cfg), time.perf_counter() - t0, state.skipped)
            history.append(rec)
            if fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(rec)
            if val_mse < best[0]:
                best = (val_mse, epoch, snapshot(model))
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped_early = True
                    break
            if cfg.time_limit is not None and rec.wall_seconds > cfg.time_limit:
                log.warning("time limit of %.0f s reached after epoch %d", cfg.time_limit, epoch)
                stopped_early = True
                break
    finally:
        if fh:
            fh.close()
    ad.zero_grad(params.values())
    restore(model, best[2])
    return TrainResult(best[2], history, best[1], best[0], state.skipped, stopped_early)
