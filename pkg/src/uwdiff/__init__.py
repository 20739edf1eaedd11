"""Classifier-guided conditional diffusion for underwater image enhancement."""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, SamplerConfig, make_schedule  # noqa: E402
from .denoiser import Checkpoint, DenoiserConfig, TrainConfig, load_checkpoint, pretrain, save_checkpoint  # noqa: E402
from .guidance import GuidanceConfig, combine_eps, enhance, finetune  # noqa: E402
from .clip import PromptPair, ToyBackend, predict_prob, train_prompts  # noqa: E402
from .synthesis import TemplatePool, build_dataset, color_transfer  # noqa: E402
from .manifest import DatasetManifest, ManifestRecord  # noqa: E402
from .metrics import MetricReport, evaluate  # noqa: E402

__all__ = [
    "Checkpoint",
    "DatasetManifest",
    "DenoiserConfig",
    "GuidanceConfig",
    "ManifestRecord",
    "MetricReport",
    "NoiseSchedule",
    "PromptPair",
    "SamplerConfig",
    "TemplatePool",
    "ToyBackend",
    "TrainConfig",
    "build_dataset",
    "color_transfer",
    "combine_eps",
    "enhance",
    "evaluate",
    "finetune",
    "load_checkpoint",
    "make_schedule",
    "predict_prob",
    "pretrain",
    "save_checkpoint",
    "train_prompts",
]
