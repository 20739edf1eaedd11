"""Noise schedule, forward process, reverse steps and the score/noise mapping.

Step indices run from 1 to ``T``; index 0 denotes the clean sample
(``alpha_bar_0 = 1``). Every function accepts numpy arrays or torch tensors.
``t`` is either an int or a per-sample integer tensor/array of shape ``(B,)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False, compare=False)
    alphas: np.ndarray = field(repr=False, compare=False)
    alpha_bars: np.ndarray = field(repr=False, compare=False)

    def alpha_bar(self, t):
        """``alpha_bar`` at step(s) ``t`` with the convention ``alpha_bar(0) == 1``."""
        return _lookup(np.concatenate([[1.0], self.alpha_bars]), t)

    def params(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.params(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.betas, dtype="<f8").tobytes())
        return h.hexdigest()

    def step_of(self, fraction: float) -> int:
        """Map a fraction of the horizon in ``(0, 1]`` to a step index."""
        return int(np.clip(round(fraction * self.T), 1, self.T))


def make_schedule(kind: str = "linear", T: int = 2000, beta_start: float = 1e-6, beta_end: float = 1e-2) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.exp(np.cumsum(np.log1p(-betas)))
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def schedule_from_params(params: dict) -> NoiseSchedule:
    return make_schedule(params["kind"], int(params["T"]), float(params["beta_start"]), float(params["beta_end"]))


def _lookup(values: np.ndarray, t):
    """Gather ``values[t]``; tensors/arrays of ``t`` come back shaped ``(B, 1, 1, 1)``."""
    if isinstance(t, torch.Tensor):
        return torch.as_tensor(values, dtype=torch.float64)[t.long().cpu()].view(-1, 1, 1, 1)
    if isinstance(t, np.ndarray) and t.ndim > 0:
        return values[t].reshape(-1, 1, 1, 1)
    return float(values[int(t)])


def _coef(values: np.ndarray, t, like):
    c = _lookup(values, t)
    if isinstance(c, torch.Tensor):
        return c.to(dtype=like.dtype, device=like.device) if isinstance(like, torch.Tensor) else c.numpy()
    return c


def _pad(values: np.ndarray) -> np.ndarray:
    return np.concatenate([[np.nan], values])


def _check_t(t, T: int, lo: int = 1):
    tt = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(tt < lo) or np.any(tt > T):
        raise ValueError(f"step index out of range [{lo}, {T}]: {t}")


def _check_shapes(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _randn_like(x, rng):
    if isinstance(x, torch.Tensor):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    rng = rng if rng is not None else np.random.default_rng()
    return rng.standard_normal(np.shape(x))


def q_sample(x0, t, eps, s: NoiseSchedule):
    """Draw ``x_t`` given the clean sample and the injected noise (closed form)."""
    _check_shapes(x0, eps, "q_sample")
    _check_t(t, s.T, lo=0)
    ab = np.concatenate([[1.0], s.alpha_bars])
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def loss_simple(eps, eps_pred):
    """Mean squared error between true and predicted noise, reduced in float64."""
    _check_shapes(eps, eps_pred, "loss_simple")
    if isinstance(eps, torch.Tensor):
        return ((eps.double() - eps_pred.double()) ** 2).mean()
    return float(np.mean((np.asarray(eps, np.float64) - np.asarray(eps_pred, np.float64)) ** 2))


def posterior_mean(x_t, eps_pred, t, s: NoiseSchedule):
    _check_t(t, s.T)
    a = _coef(_pad(s.alphas), t, x_t)
    b = _coef(_pad(s.betas), t, x_t)
    ab = _coef(_pad(s.alpha_bars), t, x_t)
    sqrt = torch.sqrt if isinstance(x_t, torch.Tensor) and isinstance(a, torch.Tensor) else np.sqrt
    return (x_t - b / sqrt(1.0 - ab) * eps_pred) / sqrt(a)


def ddpm_step(x_t, eps_pred, t: int, s: NoiseSchedule, rng=None):
    """Ancestral step ``x_t -> x_{t-1}`` with variance ``beta_t``; noiseless at ``t == 1``."""
    mean = posterior_mean(x_t, eps_pred, t, s)
    if int(t) == 1:
        return mean
    return mean + np.sqrt(s.betas[int(t) - 1]) * _randn_like(x_t, rng)


def ddim_sigma(t: int, t_prev: int, s: NoiseSchedule, eta: float) -> float:
    ab_t, ab_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    return float(eta * np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev))


def predict_x0(x_t, eps_pred, t, s: NoiseSchedule):
    ab = _coef(np.concatenate([[1.0], s.alpha_bars]), t, x_t)
    return (x_t - (1 - ab) ** 0.5 * eps_pred) / ab**0.5


def clip_eps(x_t, eps_pred, t, s: NoiseSchedule, lo: float = -1.0, hi: float = 1.0):
    """Noise estimate consistent with the predicted ``x0`` clamped to ``[lo, hi]``."""
    ab = _coef(np.concatenate([[1.0], s.alpha_bars]), t, x_t)
    x0 = predict_x0(x_t, eps_pred, t, s)
    x0 = x0.clamp(lo, hi) if isinstance(x0, torch.Tensor) else np.clip(x0, lo, hi)
    return (x_t - ab**0.5 * x0) / (1 - ab) ** 0.5


def ddim_step(x_t, eps_pred, t: int, t_prev: int, s: NoiseSchedule, eta: float = 0.0, rng=None):
    """Generalized DDIM update from ``t`` to ``t_prev < t``."""
    if not 0 <= t_prev < t <= s.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    ab_prev = s.alpha_bar(t_prev)
    sigma = ddim_sigma(t, t_prev, s, eta)
    x0 = predict_x0(x_t, eps_pred, t, s)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps_pred
    if sigma > 0:
        out = out + sigma * _randn_like(x_t, rng)
    return out


def score_from_eps(eps_pred, t, s: NoiseSchedule):
    _check_t(t, s.T)
    return -eps_pred / _coef(np.sqrt(1.0 - _pad(s.alpha_bars)), t, eps_pred)


def eps_from_score(score, t, s: NoiseSchedule):
    _check_t(t, s.T)
    return -score * _coef(np.sqrt(1.0 - _pad(s.alpha_bars)), t, score)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    ddim_steps: int = 50
    ddim_eta: float = 0.0
    rng_seed: int = 0
    clip_x0: bool = True

    def validate(self, T: int):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"sampler kind must be ddpm or ddim, got {self.kind!r}")
        if not 1 <= self.ddim_steps <= T:
            raise ValueError(f"ddim_steps must be in [1, {T}], got {self.ddim_steps}")
        if self.ddim_eta < 0:
            raise ValueError("ddim_eta must be >= 0")


def timestep_grid(T: int, kind: str, ddim_steps: int) -> list[int]:
    """Descending step indices visited by the sampler (ends at 1 for DDPM, or before 0 for DDIM)."""
    if kind == "ddpm":
        return list(range(T, 0, -1))
    steps = np.unique(np.round(np.linspace(1, T, ddim_steps)).astype(int))
    return [int(v) for v in steps[::-1]]
