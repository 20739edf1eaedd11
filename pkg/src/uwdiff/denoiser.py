"""Noise-prediction U-Net conditioned on the degraded image, and its pretraining loop.

The network sees ``concat([y, x_t])`` along channels and a sinusoidal embedding
of ``t`` that is injected into every residual block. Images are handled in
model space, ``[-1, 1]``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, loss_simple, q_sample, schedule_from_params
from .imageio import load_rgb
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGES = ("pretrained", "finetuned")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    image_size: int = 32
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 128
    init: str = "xavier"
    channels: int = 3

    def validate(self):
        if self.depth < 1:
            raise ValueError("denoiser.depth must be >= 1")
        if self.image_size % (2 ** (self.depth - 1)):
            raise ValueError(
                f"denoiser.image_size={self.image_size} is not divisible by 2^(depth-1)={2 ** (self.depth - 1)}"
            )
        if self.init != "xavier":
            raise ValueError(f"denoiser.init must be 'xavier', got {self.init!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay: str = "linear"
    batch_size: int = 8
    max_steps: int = 2000
    optimizer: str = "adam"
    rng_seed: int = 0
    augment: bool = True
    ema_decay: float | None = None
    deterministic: bool = True
    epochs: int | None = None

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError("train.learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("train.max_steps must be >= 0")
        if self.lr_decay not in ("linear", "none"):
            raise ValueError(f"train.lr_decay must be 'linear' or 'none', got {self.lr_decay!r}")
        if self.optimizer != "adam":
            raise ValueError(f"train.optimizer must be 'adam', got {self.optimizer!r}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = nn.Conv2d(2 * cfg.channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        cin = chans[0]
        for i, c in enumerate(chans):
            self.down.append(ResBlock(cin, c, temb))
            cin = c
            if i < len(chans) - 1:
                self.pool.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(cin, cin, temb)
        self.up = nn.ModuleList()
        for c in reversed(chans):
            self.up.append(ResBlock(cin + c, c, temb))
            cin = c
        self.out_norm = nn.GroupNorm(_groups(cin), cin)
        self.out = nn.Conv2d(cin, cfg.channels, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, inp: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(inp.dtype))
        h = self.stem(inp)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.pool):
                h = self.pool[i](h)
        h = self.mid(h, emb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def predict_eps(model: UNet, x_t: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
    """Noise estimate for ``x_t`` given the condition ``y``; ``t`` is an int or a ``(B,)`` tensor."""
    if x_t.shape != y.shape:
        raise ValueError(f"x_t and y must have the same shape, got {tuple(x_t.shape)} and {tuple(y.shape)}")
    if not isinstance(t, torch.Tensor):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    return model(torch.cat([y, x_t], dim=1), t)


def to_model_space(img: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` or ``(N, H, W, 3)`` array in [0, 1] -> ``(N, 3, H, W)`` float32 tensor in [-1, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))) * 2.0 - 1.0


def to_image_space(x: torch.Tensor) -> np.ndarray:
    return ((x.detach().double().clamp(-1, 1) + 1.0) / 2.0).permute(0, 2, 3, 1).cpu().numpy()


@dataclass
class PairedImages:
    """In-memory paired tensors in model space: ``y`` degraded, ``x`` reference."""

    ids: list
    y: torch.Tensor
    x: torch.Tensor

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_size: int) -> "PairedImages":
        recs = manifest.paired()
        if not recs:
            raise TrainingError("dataset has no paired (degraded, reference) records")
        ys = [load_rgb(manifest.resolve(r.degraded_path), image_size) for r in recs]
        xs = [load_rgb(manifest.resolve(r.reference_path), image_size) for r in recs]
        return cls([r.id for r in recs], to_model_space(np.stack(ys)), to_model_space(np.stack(xs)))

    @classmethod
    def from_arrays(cls, degraded: np.ndarray, reference: np.ndarray) -> "PairedImages":
        return cls(list(range(len(degraded))), to_model_space(degraded), to_model_space(reference))


def augment_pair(x: torch.Tensor, y: torch.Tensor, gen: torch.Generator):
    """Random 90-degree rotation and horizontal flip, identical within each pair."""
    both = torch.cat([x, y], dim=1)
    k = torch.randint(0, 4, (both.shape[0],), generator=gen)
    flip = torch.randint(0, 2, (both.shape[0],), generator=gen)
    out = []
    for i in range(both.shape[0]):
        b = torch.rot90(both[i], int(k[i]), dims=(1, 2))
        out.append(torch.flip(b, dims=(2,)) if flip[i] else b)
    both = torch.stack(out)
    c = x.shape[1]
    return both[:, :c], both[:, c:]


def set_determinism(enabled: bool):
    torch.use_deterministic_algorithms(enabled, warn_only=False)


def lr_lambda(tcfg: TrainConfig, total: int) -> Callable[[int], float]:
    if tcfg.lr_decay == "none" or total <= 0:
        return lambda k: 1.0
    return lambda k: max(0.0, 1.0 - k / total)


@dataclass
class Checkpoint:
    state_dict: dict
    metadata: dict = field(default_factory=dict)

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(**self.metadata["denoiser"])

    @property
    def schedule(self) -> NoiseSchedule:
        return schedule_from_params(self.metadata["schedule"])

    @property
    def stage(self) -> str:
        return self.metadata["stage"]

    def model(self) -> UNet:
        m = UNet(self.denoiser_config)
        m.load_state_dict(self.state_dict)
        m.eval()
        return m


def make_checkpoint(model: UNet, s: NoiseSchedule, tcfg: TrainConfig, step: int, stage: str, **extra) -> Checkpoint:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    meta = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": int(step),
        "schedule": s.params(),
        "schedule_digest": s.digest(),
        "denoiser": asdict(model.cfg),
        "train": asdict(tcfg),
    }
    meta.update(extra)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, meta)


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>`` (parameter blob) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"version": CHECKPOINT_VERSION, "state_dict": ckpt.state_dict}, buf)
    path.write_bytes(buf.getvalue())
    meta = dict(ckpt.metadata, params_digest=_state_digest(ckpt.state_dict))
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path, expect_denoiser: DenoiserConfig | None = None, expect_schedule: NoiseSchedule | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if not sidecar(path).exists():
        raise CheckpointError(f"checkpoint metadata not found: {sidecar(path)}")
    meta = json.loads(sidecar(path).read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        state = blob["state_dict"]
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint blob {path}: {exc}") from None
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint blob version {blob.get('version')} != {CHECKPOINT_VERSION}")
    if _state_digest(state) != meta.get("params_digest"):
        raise CheckpointError(f"parameter digest mismatch for {path}; blob and metadata disagree")
    stored = schedule_from_params(meta["schedule"])
    if stored.digest() != meta.get("schedule_digest"):
        raise CheckpointError("schedule_digest does not match the recorded schedule parameters")
    if expect_schedule is not None and expect_schedule.digest() != stored.digest():
        raise CheckpointError(
            f"schedule mismatch: checkpoint has {stored.params()}, expected {expect_schedule.params()}"
        )
    if expect_denoiser is not None:
        have = meta["denoiser"]
        for f in fields(DenoiserConfig):
            want = getattr(expect_denoiser, f.name)
            if have.get(f.name) != want:
                raise CheckpointError(f"denoiser.{f.name} mismatch: checkpoint has {have.get(f.name)!r}, expected {want!r}")
    meta.pop("params_digest", None)
    return Checkpoint(state, meta)


class LossLog:
    """CSV training log with columns step, loss, lr, wallclock_s."""

    columns = ("step", "loss", "lr", "wallclock_s")

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path else None
        self._t0 = time.perf_counter()

    def add(self, step: int, loss: float, lr: float):
        self.rows.append((step, loss, lr, time.perf_counter() - self._t0))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            for step, loss, lr, wall in self.rows:
                w.writerow([step, repr(loss), repr(lr), f"{wall:.3f}"])


class _Ema:
    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module):
        for k, v in model.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)


def _check_finite(loss: torch.Tensor, step: int, t: torch.Tensor):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {step} (t={t.tolist()})")


def pretrain(
    data: PairedImages | DatasetManifest,
    s: NoiseSchedule,
    dcfg: DenoiserConfig,
    tcfg: TrainConfig,
    log_path=None,
    callback: Callable | None = None,
) -> tuple[Checkpoint, LossLog]:
    """Fit the noise predictor on paired data; returns the checkpoint and its loss log."""
    dcfg.validate()
    tcfg.validate()
    if isinstance(data, DatasetManifest):
        if not len(data):
            raise TrainingError("empty dataset")
        data = PairedImages.from_manifest(data, dcfg.image_size)
    if len(data) == 0:
        raise TrainingError("empty dataset")
    set_determinism(tcfg.deterministic)
    torch.manual_seed(tcfg.rng_seed)
    model = UNet(dcfg)
    gen = torch.Generator().manual_seed(tcfg.rng_seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(tcfg, tcfg.max_steps))
    ema = _Ema(model, tcfg.ema_decay) if tcfg.ema_decay else None
    losslog = LossLog(log_path)
    model.train()
    for step in range(tcfg.max_steps):
        idx = torch.randint(len(data), (tcfg.batch_size,), generator=gen)
        x0, y = data.x[idx], data.y[idx]
        if tcfg.augment:
            x0, y = augment_pair(x0, y, gen)
        t = torch.randint(1, s.T + 1, (tcfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, s)
        loss = loss_simple(eps, predict_eps(model, x_t, y, t))
        _check_finite(loss, step, t)
        if callback is not None:
            callback(step=step, model=model, x0=x0, y=y, t=t, eps=eps, loss=loss.item())
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if ema is not None:
            ema.update(model)
        losslog.add(step, loss.item(), lr)
    losslog.write()
    model.eval()
    if ema is not None:
        model.load_state_dict(ema.shadow)
    return make_checkpoint(model, s, tcfg, tcfg.max_steps, "pretrained"), losslog
