"""Classic VAR(p) processes: sampling, simulation and exact contribution maps.

Convention: ``y_t = sum_m A_m y_{t-m} + u_t`` with column-vector
observations, so ``coeffs[m-1][c_out, c_in]`` is the effect of channel
``c_in`` at lag ``m`` on channel ``c_out``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, SamplingError

MAX_REJECTIONS = 1000


@dataclass
class VarProcess:
    coeffs: np.ndarray  # (p, C, C)
    noise_std: np.ndarray  # (C,)
    stable: bool = False
    exo_coeffs: np.ndarray | None = None  # (q+1, C, E), optional VARX terms
    rejections: int = 0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3 or self.coeffs.shape[1] != self.coeffs.shape[2]:
            raise ConfigError(f"coeffs must be (p, C, C), got {self.coeffs.shape}")
        C = self.coeffs.shape[1]
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), (C,)).copy()

    @property
    def p(self) -> int:
        return self.coeffs.shape[0]

    @property
    def C(self) -> int:
        return self.coeffs.shape[1]

    def to_dict(self) -> dict:
        out = {
            "p": self.p,
            "C": self.C,
            "coeffs": self.coeffs.tolist(),
            "noise_std": self.noise_std.tolist(),
            "stable": self.stable,
            "rejections": self.rejections,
        }
        if self.exo_coeffs is not None:
            out["exo_coeffs"] = np.asarray(self.exo_coeffs).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VarProcess":
        exo = d.get("exo_coeffs")
        return cls(np.array(d["coeffs"]), np.array(d["noise_std"]), bool(d.get("stable", False)),
                   None if exo is None else np.array(exo), int(d.get("rejections", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def companion_matrix(proc: VarProcess) -> np.ndarray:
    p, C = proc.p, proc.C
    F = np.zeros((p * C, p * C))
    F[:C, :] = np.concatenate(list(proc.coeffs), axis=1) if p else 0.0
    if p > 1:
        F[C:, :-C] = np.eye((p - 1) * C)
    return F


@dataclass
class SpectralRadius:
    value: float
    converged: bool = True
    iterations: int = 0


def companion_spectral_radius(proc: VarProcess, iters: int = 200, tol: float = 1e-9) -> SpectralRadius:
    """Spectral radius of the companion matrix by power iteration.

    The growth ratio ``||F x_k|| / ||x_k||`` converges geometrically when the
    dominant eigenvalue is real and simple.  When it has not settled to
    ``tol`` after ``iters`` steps (complex dominant pair, near-degenerate
    moduli) the Gelfand estimate ``||F^k||^(1/k)``, which never undershoots
    the true radius, is returned with ``converged=False``.
    """
    F = companion_matrix(proc)
    n = F.shape[0]
    if not np.any(F):
        return SpectralRadius(0.0, True, 0)
    x = np.random.default_rng(12345).standard_normal(n)
    x /= np.linalg.norm(x)
    M = np.eye(n)
    log_norm = 0.0
    prev = np.inf
    for k in range(1, iters + 1):
        fx = F @ x
        ratio = float(np.linalg.norm(fx))
        if ratio == 0.0:
            return SpectralRadius(0.0, True, k)
        x = fx / ratio
        if abs(ratio - prev) < tol * max(1.0, ratio):
            return SpectralRadius(ratio, True, k)
        prev = ratio
        M = F @ M
        nrm = np.linalg.norm(M, 2)
        if nrm == 0.0:
            return SpectralRadius(0.0, True, k)
        log_norm += np.log(nrm)
        M /= nrm
    bound = float(np.exp(log_norm / iters))
    warnings.warn(f"power iteration did not converge in {iters} steps; "
                  f"returning upper bound {bound:.6g}", RuntimeWarning, stacklevel=2)
    return SpectralRadius(bound, False, iters)


def sample_var_process(rng: np.random.Generator, p_choices, coeff_range, C: int,
                       noise_std: float = 1.0, require_stable: bool = True) -> VarProcess:
    """Draw a lag order uniformly from ``p_choices`` and i.i.d. uniform coefficients.

    Unstable draws (companion spectral radius >= 1) are rejected and redrawn.
    """
    lo, hi = float(coeff_range[0]), float(coeff_range[1])
    p_choices = sorted(set(int(p) for p in p_choices))
    if not p_choices:
        raise ConfigError("p_choices must be non-empty")
    if lo > hi:
        raise ConfigError(f"coefficient range must satisfy lo <= hi, got [{lo}, {hi}]")
    if min(p_choices) < 1 or C < 1:
        raise ConfigError("lag orders and channel count must be positive")
    for attempt in range(MAX_REJECTIONS):
        p = int(rng.choice(p_choices))
        coeffs = rng.uniform(lo, hi, size=(p, C, C)) if hi > lo else np.full((p, C, C), lo)
        proc = VarProcess(coeffs, noise_std)
        if not require_stable:
            return proc
        if _is_stable(proc):
            proc.stable = True
            proc.rejections = attempt
            return proc
    raise SamplingError(
        f"{MAX_REJECTIONS} consecutive unstable draws for p in {p_choices}, "
        f"range [{lo}, {hi}], C={C}")


def _is_stable(proc: VarProcess) -> bool:
    # exact eigenvalues for the accept/reject decision; power iteration is the
    # reported diagnostic
    return bool(np.max(np.abs(np.linalg.eigvals(companion_matrix(proc)))) < 1.0)


def simulate(proc: VarProcess, length: int, rng: np.random.Generator | None = None,
             burn_in: int = 50, init: np.ndarray | None = None,
             noise: np.ndarray | None = None) -> np.ndarray:
    """Simulate ``length`` steps after discarding ``burn_in`` steps.

    ``init`` (p x C, oldest first) replaces the zero initial state; ``noise``
    ((burn_in + length) x C) replaces draws from ``rng``.
    """
    if length < 1:
        raise ConfigError("length must be >= 1")
    p, C = proc.p, proc.C
    total = burn_in + length
    if noise is None:
        if rng is None:
            raise ConfigError("simulate needs an rng or explicit noise")
        noise = rng.standard_normal((total, C)) * proc.noise_std
    noise = np.asarray(noise, dtype=np.float64)
    y = np.zeros((p + total, C))
    if init is not None:
        y[:p] = np.asarray(init, dtype=np.float64).reshape(p, C)
    # lagged design: y[t] = sum_m A_m y[t-m]
    A = proc.coeffs
    for t in range(p, p + total):
        acc = noise[t - p].copy()
        for m in range(1, p + 1):
            acc += A[m - 1] @ y[t - m]
        y[t] = acc
    out = y[p + burn_in:]
    if np.any(np.abs(out) > 1e6) or not np.all(np.isfinite(out)):
        raise NumericError("VAR simulation exceeded |y| > 1e6; process is not stable")
    return out


def simulate_batch(coeffs: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Vectorised zero-initialised simulation for many processes at once.

    ``coeffs`` is (B, p_max, C, C) with unused lags zero-padded, ``noise`` is
    (B, steps, C).  Returns (B, steps, C).
    """
    B, pmax, C, _ = coeffs.shape
    steps = noise.shape[1]
    y = np.zeros((B, pmax + steps, C))
    for t in range(steps):
        acc = noise[:, t].copy()
        for m in range(1, pmax + 1):
            acc += np.einsum("bij,bj->bi", coeffs[:, m - 1], y[:, pmax + t - m])
        y[:, pmax + t] = acc
    out = y[:, pmax:]
    if np.any(np.abs(out) > 1e6):
        raise NumericError("VAR simulation exceeded |y| > 1e6; process is not stable")
    return out


def ground_truth_contributions(proc: VarProcess, series_or_T) -> np.ndarray:
    """Noiseless sensitivity map ``W[t, j] = d y_t / d y_j`` (T x T x C x C).

    Built from the recursion ``W[t, j] = sum_m A_m W[t-m, j]`` with
    ``W[j, j] = I``; zero above the diagonal.
    """
    T = series_or_T if isinstance(series_or_T, (int, np.integer)) else np.asarray(series_or_T).shape[0]
    C, p = proc.C, proc.p
    W = np.zeros((T, T, C, C))
    eye = np.eye(C)
    for j in range(T):
        W[j, j] = eye
        for t in range(j + 1, T):
            acc = np.zeros((C, C))
            for m in range(1, min(p, t - j) + 1):
                acc += proc.coeffs[m - 1] @ W[t - m, j]
            W[t, j] = acc
    return W


def replay_contributions(proc: VarProcess, T: int) -> np.ndarray:
    """Perturbation-replay oracle for :func:`ground_truth_contributions`.

    Sets ``y_j`` to each unit basis vector, runs the noiseless recursion
    forward from there and records the response (independent code path).
    """
    C, p = proc.C, proc.p
    W = np.zeros((T, T, C, C))
    for j in range(T):
        for c in range(C):
            y = np.zeros((T, C))
            y[j, c] = 1.0
            for t in range(j + 1, T):
                y[t] = sum(proc.coeffs[m - 1] @ y[t - m] for m in range(1, p + 1) if t - m >= j)
            W[:, j, :, c] = y
    return W


def lag_support(proc: VarProcess, tol: float = 0.0) -> list[int]:
    """Lags whose coefficient matrix has any entry above ``tol``."""
    return [m + 1 for m in range(proc.p) if np.max(np.abs(proc.coeffs[m])) > tol]
