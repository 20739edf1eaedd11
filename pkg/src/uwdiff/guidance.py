"""Classifier-guided fine-tuning and sampling.

The degraded-image condition is carried by the concatenation-conditioned network;
the natural-domain classifier enters as an additive gradient term on the noise
estimate, weighted by ``1 - lambda`` and confined to steps ``t <= round(t_m * T)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .clip import PromptPair, clip_log_grad
from .denoiser import (
    STAGES,
    Checkpoint,
    CheckpointError,
    LossLog,
    PairedImages,
    TrainConfig,
    TrainingError,
    _check_finite,
    augment_pair,
    lr_lambda,
    make_checkpoint,
    predict_eps,
    set_determinism,
    to_image_space,
    to_model_space,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    _coef,
    _pad,
    clip_eps,
    ddim_step,
    ddpm_step,
    loss_simple,
    predict_x0,
    q_sample,
    timestep_grid,
)
from .manifest import DatasetManifest

log = logging.getLogger(__name__)


@dataclass
class GuidanceConfig:
    lam: float = 0.4
    t_m: float = 1.0
    clip_enabled: bool = True
    condition_dropout: bool = False
    dropout_prob: float = 0.1
    grad_clip_rms: float | None = 1.0
    clip_input: str = "xt"
    inference_guidance: bool = True

    def violations(self, prefix: str = "guidance") -> list[tuple[str, str]]:
        out = []
        if not 0.0 <= self.lam <= 1.0:
            out.append((f"{prefix}.lambda", f"must be in [0, 1], got {self.lam}"))
        if not 0.0 < self.t_m <= 1.0:
            out.append((f"{prefix}.t_m", f"must be in (0, 1], got {self.t_m}"))
        if not 0.0 <= self.dropout_prob < 1.0:
            out.append((f"{prefix}.dropout_prob", f"must be in [0, 1), got {self.dropout_prob}"))
        if self.grad_clip_rms is not None and self.grad_clip_rms <= 0:
            out.append((f"{prefix}.grad_clip_rms", "must be positive or null"))
        if self.clip_input not in ("xt", "x0"):
            out.append((f"{prefix}.clip_input", f"must be 'xt' or 'x0', got {self.clip_input!r}"))
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(f"{k}: {m}" for k, m in bad))


@dataclass
class GuidedEpsComponents:
    eps_net: torch.Tensor
    clip_grad_term: torch.Tensor
    combined: torch.Tensor


def _active_mask(t, t_max: int, like):
    if isinstance(t, torch.Tensor):
        return (t <= t_max).to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return 1.0 if int(t) <= t_max else 0.0


def combine_eps(eps_net, clip_grad, t, cfg: GuidanceConfig, s: NoiseSchedule, eps_uncond=None) -> GuidedEpsComponents:
    """Noise estimate with the classifier gradient folded in.

    ``combined = eps_net - (1 - lam) * sqrt(1 - alpha_bar_t) * clip_grad`` inside the
    guided range, ``eps_net`` outside it or with the classifier disabled. With
    ``eps_uncond`` (condition-dropout models) the condition term is also blended:
    ``eps_uncond + lam * (eps_net - eps_uncond)``.
    """
    if tuple(eps_net.shape) != tuple(clip_grad.shape):
        raise ValueError(f"shape mismatch: eps_net {tuple(eps_net.shape)} vs clip_grad {tuple(clip_grad.shape)}")
    scale = _coef(np.sqrt(1.0 - _pad(s.alpha_bars)), t, eps_net)
    weight = 1.0 - cfg.lam
    if cfg.clip_enabled:
        term = (weight * scale * _active_mask(t, s.step_of(cfg.t_m), eps_net)) * clip_grad
    else:
        term = clip_grad * 0.0
    base = eps_net if eps_uncond is None else eps_uncond + cfg.lam * (eps_net - eps_uncond)
    return GuidedEpsComponents(eps_net=eps_net, clip_grad_term=term, combined=base - term)


def clip_rms(grad: torch.Tensor, max_rms: float | None) -> torch.Tensor:
    """Rescale each image's gradient so its RMS does not exceed ``max_rms``."""
    if max_rms is None:
        return grad
    rms = grad.pow(2).flatten(1).mean(1).sqrt().view(-1, *([1] * (grad.ndim - 1)))
    return grad * torch.clamp(max_rms / rms.clamp_min(1e-12), max=1.0)


def guidance_gradient(x_t, t, eps_net, prompts: PromptPair, backend, cfg: GuidanceConfig, s: NoiseSchedule):
    """Classifier log-gradient w.r.t. ``x_t``, RMS-clipped; no gradient flows to the denoiser."""
    if cfg.clip_input == "x0":
        ab = _coef(np.concatenate([[1.0], s.alpha_bars]), t, x_t)
        x0 = predict_x0(x_t.detach(), eps_net.detach(), t, s)
        g = clip_log_grad(x0, prompts, backend) / ab**0.5
    else:
        g = clip_log_grad(x_t.detach(), prompts, backend)
    return clip_rms(g.to(x_t.dtype), cfg.grad_clip_rms)


def _null_condition(y: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(y)


def finetune_steps_per_epoch(n_pairs: int, batch_size: int, t_max: int, T: int) -> int:
    """Steps in one fine-tuning epoch.

    An epoch keeps the number of samples per timestep fixed: a full-range epoch is
    one pass over the pairs, and a truncated range gets the proportional share.
    """
    return max(1, math.ceil(n_pairs / batch_size * t_max / T))


def sample_timesteps(n: int, t_max: int, gen: torch.Generator) -> torch.Tensor:
    """Uniform draws from ``[1, t_max]``."""
    return torch.randint(1, t_max + 1, (n,), generator=gen)


def finetune(
    pretrained: Checkpoint,
    data: PairedImages | DatasetManifest,
    prompts: PromptPair | None,
    backend,
    s: NoiseSchedule,
    cfg: GuidanceConfig,
    tcfg: TrainConfig,
    log_path=None,
    callback: Callable | None = None,
) -> tuple[Checkpoint, LossLog]:
    """Continue training on reference pairs with the guided noise target, only for ``t <= round(t_m * T)``."""
    cfg.validate()
    tcfg.validate()
    if pretrained.stage not in STAGES:
        raise CheckpointError(f"cannot fine-tune from stage {pretrained.stage!r}")
    if pretrained.metadata.get("schedule_digest") != s.digest():
        raise CheckpointError(f"schedule mismatch: checkpoint has {pretrained.metadata['schedule']}, got {s.params()}")
    if cfg.clip_enabled and (prompts is None or backend is None):
        raise ValueError("clip_enabled fine-tuning needs prompts and a backend")
    if isinstance(data, DatasetManifest):
        if not len(data):
            raise TrainingError("empty dataset")
        data = PairedImages.from_manifest(data, pretrained.denoiser_config.image_size)
    if len(data) == 0:
        raise TrainingError("empty dataset")

    set_determinism(tcfg.deterministic)
    torch.manual_seed(tcfg.rng_seed)
    model = pretrained.model()
    model.train()
    t_max = s.step_of(cfg.t_m)
    if tcfg.epochs:
        per_epoch = finetune_steps_per_epoch(len(data), tcfg.batch_size, t_max, s.T)
        total = tcfg.epochs * per_epoch
    else:
        per_epoch, total = None, tcfg.max_steps
    gen = torch.Generator().manual_seed(tcfg.rng_seed + 2)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(tcfg, total))
    losslog = LossLog(log_path)
    losslog.epoch_times = []
    epoch_start = time.perf_counter()
    for step in range(total):
        idx = torch.randint(len(data), (tcfg.batch_size,), generator=gen)
        x0, y = data.x[idx], data.y[idx]
        if tcfg.augment:
            x0, y = augment_pair(x0, y, gen)
        if cfg.condition_dropout:
            drop = torch.rand(tcfg.batch_size, generator=gen) < cfg.dropout_prob
            y = torch.where(drop.view(-1, 1, 1, 1), _null_condition(y), y)
        t = sample_timesteps(tcfg.batch_size, t_max, gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, s)
        eps_net = predict_eps(model, x_t, y, t)
        if cfg.clip_enabled:
            grad = guidance_gradient(x_t, t, eps_net, prompts, backend, cfg, s)
        else:
            grad = torch.zeros_like(eps_net)
        combined = combine_eps(eps_net, grad, t, cfg, s).combined
        loss = loss_simple(eps, combined)
        _check_finite(loss, step, t)
        if callback is not None:
            callback(step=step, model=model, x0=x0, y=y, t=t, eps=eps, clip_grad=grad, loss=loss.item())
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losslog.add(step, loss.item(), lr)
        if per_epoch and (step + 1) % per_epoch == 0:
            now = time.perf_counter()
            losslog.epoch_times.append(now - epoch_start)
            epoch_start = now
    losslog.write()
    model.eval()
    extra = {"guidance": asdict(cfg), "prompts_backend": prompts.backend_id if prompts is not None else None}
    step0 = int(pretrained.metadata.get("step", 0))
    return make_checkpoint(model, s, tcfg, step0 + total, "finetuned", **extra), losslog


def enhance(
    model: Checkpoint,
    y,
    prompts: PromptPair | None = None,
    backend=None,
    s: NoiseSchedule | None = None,
    sampler: SamplerConfig = SamplerConfig(),
    cfg: GuidanceConfig = GuidanceConfig(),
) -> np.ndarray:
    """Sample an enhanced image for each degraded input; returns RGB in [0, 1].

    Steps above ``round(t_m * T)`` use the conditioned network alone; below it the
    classifier gradient is added when enabled and prompts/backend are supplied.
    """
    cfg.validate()
    if s is None:
        s = model.schedule
    elif model.metadata.get("schedule_digest") != s.digest():
        raise CheckpointError(f"schedule mismatch: checkpoint has {model.metadata['schedule']}, got {s.params()}")
    sampler.validate(s.T)
    single = np.ndim(y) == 3
    cond = to_model_space(y)
    size = model.denoiser_config.image_size
    if cond.shape[-1] != size or cond.shape[-2] != size:
        raise ValueError(f"input is {tuple(cond.shape[-2:])}, model expects {size}x{size}")
    net = model.model()
    guided = cfg.clip_enabled and cfg.inference_guidance
    if guided and (prompts is None or backend is None):
        log.info("classifier guidance requested but no prompts/backend given; sampling without it")
        guided = False
    uncond = cfg.condition_dropout and model.metadata.get("guidance", {}).get("condition_dropout", False)
    t_max = s.step_of(cfg.t_m)
    gen = torch.Generator().manual_seed(sampler.rng_seed)
    x = torch.randn(cond.shape, generator=gen)
    grid = timestep_grid(s.T, sampler.kind, sampler.ddim_steps)
    for i, t in enumerate(grid):
        with torch.no_grad():
            eps_net = predict_eps(net, x, cond, t)
            eps_u = predict_eps(net, x, _null_condition(cond), t) if uncond else None
        if guided and t <= t_max:
            grad = guidance_gradient(x, t, eps_net, prompts, backend, cfg, s)
            eps = combine_eps(eps_net, grad, t, cfg, s, eps_uncond=eps_u).combined
        elif eps_u is not None:
            eps = eps_u + cfg.lam * (eps_net - eps_u)
        else:
            eps = eps_net
        with torch.no_grad():
            if sampler.clip_x0:
                eps = clip_eps(x, eps, t, s)
            if sampler.kind == "ddpm":
                x = ddpm_step(x, eps, t, s, gen)
            else:
                t_prev = grid[i + 1] if i + 1 < len(grid) else 0
                x = ddim_step(x, eps, t, t_prev, s, sampler.ddim_eta, gen)
    out = to_image_space(x)
    return out[0] if single else out
