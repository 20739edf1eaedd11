"""Run configuration stored as a flat ``section.key = value`` text file.

Values use JSON literal syntax (``true``, ``null``, ``1e-4``, ``"text"``); ``#``
starts a comment. Sub-seeds and the deterministic flag are taken from the
top-level ``seed`` and ``deterministic`` keys.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig, TrainConfig
from .diffusion import SamplerConfig, make_schedule
from .guidance import GuidanceConfig


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.violations))


@dataclass
class ScheduleParams:
    kind: str = "linear"
    T: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 1e-2


@dataclass
class PromptConfig:
    backend: str = "toy:seed=0"
    text_natural: str = "a clear photo taken in air"
    text_underwater: str = "a murky underwater photo"
    steps: int = 500
    learning_rate: float = 1e-3


@dataclass
class SynthConfig:
    max_failure_fraction: float = 0.10
    workers: int = 1


@dataclass
class MetricToggles:
    psnr: bool = True
    ssim: bool = True
    uiqm: bool = True
    uciqe: bool = True
    cpbd: bool = True
    ciede2000: bool = True


@dataclass
class DiagnoseConfig:
    stride: int = 10


def _finetune_defaults() -> TrainConfig:
    return TrainConfig(learning_rate=3e-6, max_steps=500)


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    paths: dict = field(default_factory=dict)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=_finetune_defaults)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    metrics: MetricToggles = field(default_factory=MetricToggles)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)

    def train_config(self, section: str) -> TrainConfig:
        return replace(getattr(self, section), rng_seed=self.seed, deterministic=self.deterministic)

    def sampler_config(self) -> SamplerConfig:
        return replace(self.sampler, rng_seed=self.seed)

    def noise_schedule(self):
        return make_schedule(**asdict(self.schedule))

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()


# seeds and determinism live at the top level
_DERIVED = {"rng_seed", "deterministic"}
_ALIASES = {("guidance", "lam"): "lambda"}


def _section_items(name: str, obj):
    if isinstance(obj, dict):
        return sorted(obj.items())
    return [
        (_ALIASES.get((name, f.name), f.name), getattr(obj, f.name))
        for f in fields(obj)
        if f.name not in _DERIVED
    ]


def flatten(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "deterministic": cfg.deterministic}
    for f in fields(cfg):
        if f.name in out:
            continue
        for k, v in _section_items(f.name, getattr(cfg, f.name)):
            out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in flatten(cfg).items())


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare words are strings


def parse_lines(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError([(f"{source}:{lineno}", f"expected 'key = value', got {raw!r}")])
        out[key.strip()] = parse_value(value.strip())
    return out


def _known(cfg: RunConfig, key: str) -> bool:
    return key in flatten(cfg) or (key.startswith("paths.") and len(key) > 6)


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Set dotted keys on a copy of ``cfg``; unknown keys are reported, not ignored."""
    cfg = copy.deepcopy(cfg)
    bad = [(k, "unknown key") for k in values if not _known(cfg, k)]
    if bad:
        raise ConfigError(bad)
    for key, value in values.items():
        _set(cfg, key, value)
    return cfg


def load_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    return apply_overrides(base if base is not None else RunConfig(), parse_lines(text))


def _set(cfg: RunConfig, key: str, value):
    if "." not in key:
        setattr(cfg, key, value)
        return
    section, name = key.split(".", 1)
    target = getattr(cfg, section)
    if isinstance(target, dict):
        target[name] = value
        return
    attr = {v: k for (s, k), v in _ALIASES.items() if s == section}.get(name, name)
    setattr(cfg, section, replace(target, **{attr: value}))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([("--config", f"file not found: {path}")])
    return load_config_text(path.read_text())


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def _type_violations(cfg: RunConfig) -> list[tuple[str, str]]:
    ref = flatten(RunConfig())
    out = []
    for key, value in flatten(cfg).items():
        want = ref.get(key)
        if want is None or value is None:
            continue
        if isinstance(want, bool):
            ok = isinstance(value, bool)
        elif isinstance(want, (int, float)):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if ok and isinstance(want, int) and not isinstance(want, bool) and not float(value).is_integer():
                ok = False
        else:
            ok = isinstance(value, type(want))
        if not ok:
            out.append((key, f"expected {type(want).__name__}, got {value!r}"))
    return out


def validate_config(cfg: RunConfig) -> list[tuple[str, str]]:
    """All violations as ``(key path, message)`` pairs; empty when the config is usable."""
    out = _type_violations(cfg)
    if out:
        return out
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        out.append(("seed", f"must be a non-negative integer, got {cfg.seed!r}"))

    s = cfg.schedule
    if s.kind != "linear":
        out.append(("schedule.kind", f"only 'linear' is supported, got {s.kind!r}"))
    if s.T < 1:
        out.append(("schedule.T", f"must be >= 1, got {s.T}"))
    if not 0 < s.beta_start < s.beta_end < 1:
        out.append(("schedule.beta_start", f"need 0 < beta_start < beta_end < 1, got {s.beta_start}, {s.beta_end}"))

    d = cfg.denoiser
    if d.depth < 1:
        out.append(("denoiser.depth", "must be >= 1"))
    elif d.image_size < 1 or d.image_size % (2 ** (d.depth - 1)):
        out.append(("denoiser.image_size", f"must be a positive multiple of 2^(depth-1) = {2 ** (d.depth - 1)}"))
    if d.base_channels < 1:
        out.append(("denoiser.base_channels", "must be >= 1"))
    if d.time_embed_dim < 2 or d.time_embed_dim % 2:
        out.append(("denoiser.time_embed_dim", "must be an even integer >= 2"))
    if d.init != "xavier":
        out.append(("denoiser.init", f"must be 'xavier', got {d.init!r}"))
    if d.channels != 3:
        out.append(("denoiser.channels", "must be 3 (RGB)"))

    for name in ("pretrain", "finetune"):
        t = getattr(cfg, name)
        if not t.learning_rate > 0:
            out.append((f"{name}.learning_rate", f"must be > 0, got {t.learning_rate}"))
        if t.batch_size < 1:
            out.append((f"{name}.batch_size", f"must be >= 1, got {t.batch_size}"))
        if t.max_steps < 0:
            out.append((f"{name}.max_steps", f"must be >= 0, got {t.max_steps}"))
        if t.lr_decay not in ("linear", "none"):
            out.append((f"{name}.lr_decay", f"must be 'linear' or 'none', got {t.lr_decay!r}"))
        if t.optimizer != "adam":
            out.append((f"{name}.optimizer", f"must be 'adam', got {t.optimizer!r}"))
        if t.ema_decay is not None and not 0 < t.ema_decay < 1:
            out.append((f"{name}.ema_decay", "must be in (0, 1) or null"))
        if t.epochs is not None and t.epochs < 1:
            out.append((f"{name}.epochs", "must be >= 1 or null"))

    out.extend(cfg.guidance.violations("guidance"))

    sm = cfg.sampler
    if sm.kind not in ("ddpm", "ddim"):
        out.append(("sampler.kind", f"must be 'ddpm' or 'ddim', got {sm.kind!r}"))
    if s.T >= 1 and not 1 <= sm.ddim_steps <= s.T:
        out.append(("sampler.ddim_steps", f"must be in [1, {s.T}], got {sm.ddim_steps}"))
    if sm.ddim_eta < 0:
        out.append(("sampler.ddim_eta", "must be >= 0"))

    p = cfg.prompts
    if p.backend.partition(":")[0] not in ("toy", "hf"):
        out.append(("prompts.backend", f"must start with 'toy:' or 'hf:', got {p.backend!r}"))
    if p.steps < 0:
        out.append(("prompts.steps", "must be >= 0"))
    if not p.learning_rate > 0:
        out.append(("prompts.learning_rate", "must be > 0"))

    if not 0 <= cfg.synth.max_failure_fraction <= 1:
        out.append(("synth.max_failure_fraction", "must be in [0, 1]"))
    if cfg.synth.workers < 1:
        out.append(("synth.workers", "must be >= 1"))
    if cfg.diagnose.stride < 1:
        out.append(("diagnose.stride", "must be >= 1"))
    return out
