"""Synthetic underwater pairs by Lab statistics transfer from a template pool."""

from __future__ import annotations

import hashlib
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorspace import clamp_lab, lab_to_rgb, rgb_to_lab
from .imageio import list_images, load_rgb, save_rgb
from .manifest import DatasetManifest, ManifestRecord

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TransferResult:
    lab: np.ndarray
    """Transferred image after clamping to the valid Lab box."""
    unclamped: np.ndarray
    clamp_count: int

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_count / max(self.unclamped.size, 1)


def channel_stats(lab: np.ndarray) -> ChannelStats:
    """Per-channel mean and population standard deviation."""
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if flat.shape[0] == 0:
        raise ValueError("channel_stats needs a non-empty image")
    return ChannelStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def color_transfer(
    source: np.ndarray,
    template: np.ndarray,
    eps: float = STD_FLOOR,
    warn_fraction: float = 0.05,
) -> TransferResult:
    """Match the per-channel Lab mean and std of ``source`` to ``template``.

    Each channel is mapped affinely, ``(s - mean_s) * std_t / max(std_s, eps) + mean_t``.
    The result is then clamped to the Lab box; the number of clamped values is
    reported and a warning is raised when their fraction exceeds ``warn_fraction``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    src = np.asarray(source, dtype=np.float64)
    s, t = channel_stats(src), channel_stats(template)
    scale = t.std / np.maximum(s.std, eps)
    raw = (src - s.mean) * scale + t.mean
    clamped, count = clamp_lab(raw)
    result = TransferResult(lab=clamped, unclamped=raw, clamp_count=count)
    if result.clamp_fraction > warn_fraction:
        warnings.warn(
            f"color transfer clamped {result.clamp_fraction:.1%} of Lab values", RuntimeWarning, stacklevel=2
        )
    return result


@dataclass
class TemplatePool:
    """Ordered collection of underwater templates (paths or in-memory RGB arrays)."""

    entries: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dir(cls, directory, seed: int = 0) -> "TemplatePool":
        return cls(entries=list_images(directory), seed=seed)

    def __len__(self):
        return len(self.entries)

    def draw(self, rng_seed: int) -> int:
        """Index of the template chosen for ``rng_seed`` (uniform over the pool)."""
        if not self.entries:
            raise SynthesisError("empty template pool")
        return int(np.random.default_rng(rng_seed).integers(len(self.entries)))

    def image(self, index: int) -> np.ndarray:
        entry = self.entries[index]
        if isinstance(entry, (str, os.PathLike)):
            return load_rgb(entry)
        return np.asarray(entry, dtype=np.float64)

    def label(self, index: int) -> str:
        entry = self.entries[index]
        if isinstance(entry, (str, os.PathLike)):
            return str(entry)
        return f"pool[{index}]"


def _degrade(natural: np.ndarray, template: np.ndarray) -> tuple[np.ndarray, float]:
    res = color_transfer(rgb_to_lab(natural), rgb_to_lab(template))
    return lab_to_rgb(res.lab), res.clamp_fraction


def synthesize_pair(natural: np.ndarray, pool: TemplatePool, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(degraded, reference)`` for one in-air image."""
    idx = pool.draw(rng_seed)
    degraded, _ = _degrade(natural, pool.image(idx))
    return degraded, np.asarray(natural, dtype=np.float64)


def item_seed(global_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def build_dataset(
    manifest_in: DatasetManifest,
    pool: TemplatePool,
    out_dir,
    global_seed: int = 0,
    max_failure_fraction: float = 0.10,
    workers: int = 1,
    split: str = "uie-air",
) -> DatasetManifest:
    """Degrade every natural image in ``manifest_in`` and write the paired dataset.

    Natural images are read from each record's ``reference_path`` (falling back to
    ``degraded_path``). Unreadable items are skipped and listed in ``errors.log``;
    more than ``max_failure_fraction`` failures abort the build.
    """
    out_dir = Path(out_dir)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)
    (out_dir / "reference").mkdir(parents=True, exist_ok=True)
    if len(manifest_in) and not len(pool):
        raise SynthesisError("empty template pool")

    def work(i: int, rec: ManifestRecord):
        seed = item_seed(global_seed, i)
        src = manifest_in.resolve(rec.reference_path or rec.degraded_path)
        try:
            natural = load_rgb(src)
        except Exception as exc:  # corrupt or unreadable input
            return None, f"{rec.id}\t{src}\t{type(exc).__name__}: {exc}"
        idx = pool.draw(seed)
        degraded, clamp_frac = _degrade(natural, pool.image(idx))
        if clamp_frac > 0:
            log.debug("item %s: %.2f%% Lab values clamped", rec.id, 100 * clamp_frac)
        save_rgb(out_dir / "degraded" / f"{rec.id}.png", degraded)
        save_rgb(out_dir / "reference" / f"{rec.id}.png", natural)
        label = pool.label(idx)
        if Path(label).is_absolute():
            label = os.path.relpath(label, out_dir)
        out = ManifestRecord(
            id=rec.id,
            degraded_path=f"degraded/{rec.id}.png",
            reference_path=f"reference/{rec.id}.png",
            template_path=label,
            seed=seed,
        )
        return out, None

    items = list(enumerate(manifest_in.records))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda a: work(*a), items))
    else:
        results = [work(i, r) for i, r in items]

    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    (out_dir / "errors.log").write_text("".join(e + "\n" for e in errors))
    if items and len(errors) / len(items) > max_failure_fraction:
        raise SynthesisError(f"{len(errors)}/{len(items)} items failed; see {out_dir / 'errors.log'}")
    manifest = DatasetManifest(records=records, split=split, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def natural_manifest(paths: Sequence, root, split: str = "toy") -> DatasetManifest:
    """Manifest of in-air images, one record per path, ids from file stems."""
    root = Path(root)
    recs = [ManifestRecord(id=Path(p).stem, reference_path=os.path.relpath(p, root)) for p in paths]
    return DatasetManifest(records=recs, split=split, root=root)
