"""Command-line entry points.

Every command writes into its own run directory (``--out``)::

    config.txt     resolved configuration snapshot (re-runnable with --config)
    run.log        log of the invocation
    outputs/       artifacts; checksummed in summary.json
    logs/, figures/  loss logs and report figures (not checksummed)
    summary.json   status, results and output checksums
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_value, save_config, validate_config
from .manifest import DatasetManifest, ManifestError, ManifestRecord

log = logging.getLogger("uwdiff")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_CHECKPOINT = 4
EXIT_RUNTIME = 5


class InputError(RuntimeError):
    pass


def _categorize(exc: BaseException) -> tuple[str, int]:
    from .denoiser import CheckpointError, TrainingError
    from .synthesis import SynthesisError

    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, CheckpointError):
        return "checkpoint", EXIT_CHECKPOINT
    if isinstance(exc, (InputError, ManifestError, FileNotFoundError, OSError)):
        return "input", EXIT_INPUT
    if isinstance(exc, (TrainingError, SynthesisError, FloatingPointError)):
        return "runtime", EXIT_RUNTIME
    return "internal", EXIT_INTERNAL


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.outputs = self.root / "outputs"
        self.logs = self.root / "logs"
        self.figures = self.root / "figures"
        self._handler = None

    def open(self, cfg: RunConfig):
        for d in (self.outputs, self.logs, self.figures):
            d.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.root / "config.txt")
        self._handler = logging.FileHandler(self.root / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("uwdiff").addHandler(self._handler)

    def close(self):
        if self._handler is not None:
            logging.getLogger("uwdiff").removeHandler(self._handler)
            self._handler.close()
            self._handler = None

    def checksums(self) -> dict:
        files = sorted(p for p in self.outputs.rglob("*") if p.is_file())
        return {p.relative_to(self.root).as_posix(): sha256_file(p) for p in files}

    def write_summary(self, command: str, cfg: RunConfig | None, status: str, results=None, error=None) -> dict:
        body = {
            "command": command,
            "status": status,
            "version": __version__,
            "config_digest": cfg.digest() if cfg is not None else None,
            "results": results or {},
            "outputs": self.checksums() if self.outputs.exists() else {},
        }
        if error is not None:
            body["error"] = error
        body["checksum"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "summary.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return body


# --- helpers ------------------------------------------------------------


def _path(cfg: RunConfig, name: str, what: str, hint: str = "") -> Path:
    value = cfg.paths.get(name)
    if not value:
        raise ConfigError([(f"paths.{name}", f"no {what} given (use --{name.replace('_', '-')} or paths.{name}){hint}")])
    p = Path(value)
    if not p.exists():
        raise InputError(f"{what} not found: {p}{hint}")
    return p


def _load_prompts(cfg: RunConfig):
    from .clip import PromptPair, make_backend

    p = _path(cfg, "prompts", "prompt file", "; create one with `uwdiff learn-prompts`")
    prompts = PromptPair.load(p)
    backend = make_backend(prompts.backend_id or cfg.prompts.backend)
    return prompts, backend


def _load_model(cfg: RunConfig, name: str, hint: str):
    from .denoiser import load_checkpoint

    return load_checkpoint(_path(cfg, name, "checkpoint", hint), cfg.denoiser, cfg.noise_schedule())


def _paired(cfg: RunConfig):
    from .denoiser import PairedImages

    manifest = DatasetManifest.load(_path(cfg, "data", "dataset manifest"))
    if not manifest.paired():
        raise InputError(f"manifest {cfg.paths['data']} has no degraded/reference pairs")
    return PairedImages.from_manifest(manifest, cfg.denoiser.image_size)


def _loss_results(losslog) -> dict:
    L = losslog.losses
    out = {"steps": int(L.size)}
    if L.size:
        k = min(100, L.size)
        out.update(loss_first100=float(L[:k].mean()), loss_last100=float(L[-k:].mean()))
    return out


def _plot_loss(run: RunDir, losslog, name: str):
    from .plotting import plot_loss

    if losslog.losses.size:
        plot_loss(np.arange(losslog.losses.size), losslog.losses, run.figures / f"{name}.png")


# --- commands -----------------------------------------------------------


def cmd_toy_data(cfg: RunConfig, run: RunDir, args) -> dict:
    from .toydata import make_toy_corpus

    make_toy_corpus(run.outputs, args.n_natural, args.n_templates, cfg.denoiser.image_size, cfg.seed)
    return {"n_natural": args.n_natural, "n_templates": args.n_templates, "manifest": "outputs/natural.jsonl"}


def cmd_synth(cfg: RunConfig, run: RunDir, args) -> dict:
    from .synthesis import TemplatePool, build_dataset

    manifest = DatasetManifest.load(_path(cfg, "manifest", "natural-image manifest"))
    pool = TemplatePool.from_dir(_path(cfg, "pool", "template pool directory"), seed=cfg.seed)
    out = build_dataset(
        manifest, pool, run.outputs, cfg.seed, cfg.synth.max_failure_fraction, cfg.synth.workers
    )
    return {"n_input": len(manifest), "n_written": len(out), "n_failed": len(manifest) - len(out), "manifest": "outputs/manifest.jsonl"}


def cmd_pretrain(cfg: RunConfig, run: RunDir, args) -> dict:
    from .denoiser import pretrain, save_checkpoint

    data = _paired(cfg)
    ckpt, losslog = pretrain(
        data, cfg.noise_schedule(), cfg.denoiser, cfg.train_config("pretrain"), log_path=run.logs / "loss.csv"
    )
    save_checkpoint(ckpt, run.outputs / "model.pt")
    _plot_loss(run, losslog, "loss")
    return {"n_pairs": len(data), **_loss_results(losslog), "checkpoint": "outputs/model.pt"}


def cmd_learn_prompts(cfg: RunConfig, run: RunDir, args) -> dict:
    from .clip import backend_digest, init_prompts, make_backend, prompt_accuracy, train_prompts
    from .imageio import list_images, load_rgb

    data = _paired(cfg)
    from .denoiser import to_image_space

    natural = to_image_space(data.x)
    if cfg.paths.get("pool"):
        pool = _path(cfg, "pool", "underwater image directory")
        underwater = np.stack([load_rgb(p, cfg.denoiser.image_size) for p in list_images(pool)])
    else:
        underwater = to_image_space(data.y)
    backend = make_backend(cfg.prompts.backend)
    before = backend_digest(backend)
    prompts = init_prompts(cfg.prompts.text_natural, cfg.prompts.text_underwater, backend)
    history = []
    prompts = train_prompts(
        natural, underwater, prompts, backend, cfg.prompts.steps, cfg.prompts.learning_rate, cfg.seed, history=history
    )
    if backend_digest(backend) != before:
        raise RuntimeError("backbone parameters changed during prompt learning")
    prompts.save(run.outputs / "prompts.npz")
    with open(run.logs / "prompt_loss.csv", "w") as f:
        f.write("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))
    return {
        "backend": prompts.backend_id,
        "steps": cfg.prompts.steps,
        "accuracy": prompt_accuracy(natural, underwater, prompts, backend),
        "final_loss": history[-1] if history else None,
        "prompts": "outputs/prompts.npz",
    }


def cmd_finetune(cfg: RunConfig, run: RunDir, args) -> dict:
    from .denoiser import save_checkpoint
    from .guidance import finetune

    base = _load_model(cfg, "from", "; pass a checkpoint written by `uwdiff pretrain`")
    prompts, backend = _load_prompts(cfg) if cfg.guidance.clip_enabled else (None, None)
    data = _paired(cfg)
    ckpt, losslog = finetune(
        base, data, prompts, backend, cfg.noise_schedule(), cfg.guidance, cfg.train_config("finetune"),
        log_path=run.logs / "loss.csv",
    )
    save_checkpoint(ckpt, run.outputs / "model.pt")
    _plot_loss(run, losslog, "loss")
    t_max = cfg.noise_schedule().step_of(cfg.guidance.t_m)
    return {"n_pairs": len(data), "t_max": t_max, **_loss_results(losslog), "checkpoint": "outputs/model.pt"}


def _enhance_inputs(cfg: RunConfig):
    """(ids, degraded images, reference paths or None, split) from a directory or manifest."""
    from .imageio import list_images, load_rgb

    src = _path(cfg, "in", "input images")
    size = cfg.denoiser.image_size
    if src.is_dir():
        files = list_images(src)
        if not files:
            raise InputError(f"no images in {src}")
        imgs = np.stack([load_rgb(p, size) for p in files])
        return [p.stem for p in files], imgs, [None] * len(files), "toy"
    manifest = DatasetManifest.load(src)
    recs = [r for r in manifest if r.degraded_path]
    if not recs:
        raise InputError(f"manifest {src} has no degraded images")
    imgs = np.stack([load_rgb(manifest.resolve(r.degraded_path), size) for r in recs])
    refs = [manifest.resolve(r.reference_path) for r in recs]
    return [r.id for r in recs], imgs, refs, manifest.split


def cmd_enhance(cfg: RunConfig, run: RunDir, args) -> dict:
    from .guidance import enhance
    from .imageio import save_rgb

    model = _load_model(cfg, "model", "; pass a checkpoint written by `uwdiff pretrain` or `uwdiff finetune`")
    prompts = backend = None
    if cfg.guidance.clip_enabled and cfg.guidance.inference_guidance and cfg.paths.get("prompts"):
        prompts, backend = _load_prompts(cfg)
    ids, imgs, refs, split = _enhance_inputs(cfg)
    out = []
    for i in range(0, len(imgs), args.batch):
        out.append(enhance(model, imgs[i : i + args.batch], prompts, backend, None, cfg.sampler_config(), cfg.guidance))
    out = np.concatenate(out)
    records = []
    for id_, img, ref in zip(ids, out, refs):
        rel = f"enhanced/{id_}.png"
        save_rgb(run.outputs / rel, img)
        ref_rel = os.path.relpath(Path(ref).resolve(), run.outputs.resolve()) if ref else None
        records.append(ManifestRecord(id=id_, degraded_path=rel, reference_path=ref_rel))
    DatasetManifest(records=records, split=split, root=run.outputs).save(run.outputs / "manifest.jsonl")
    return {"n_images": len(ids), "guided": prompts is not None, "manifest": "outputs/manifest.jsonl"}


def cmd_evaluate(cfg: RunConfig, run: RunDir, args) -> dict:
    from .metrics import evaluate
    from .plotting import plot_metrics

    manifest = DatasetManifest.load(_path(cfg, "manifest", "evaluation manifest"))
    include = [k for k, on in vars(cfg.metrics).items() if on]
    report = evaluate(manifest, run.outputs / "metrics.csv", include=include)
    if report.records:
        plot_metrics(report, run.figures / "metrics.png")
    return {"n_scored": len(report.records), "n_skipped": len(manifest) - len(report.records), "means": report.means}


def cmd_diagnose(cfg: RunConfig, run: RunDir, args) -> dict:
    from .clip import score_curve
    from .imageio import load_rgb

    prompts, backend = _load_prompts(cfg)
    size = cfg.denoiser.image_size
    if cfg.paths.get("raw") or cfg.paths.get("ref"):
        raw = load_rgb(_path(cfg, "raw", "raw image"), size)
        ref = load_rgb(_path(cfg, "ref", "reference image"), size)
    else:
        manifest = DatasetManifest.load(_path(cfg, "data", "paired manifest (or --raw/--ref images)"))
        pairs = manifest.paired()
        if not pairs:
            raise InputError("manifest has no degraded/reference pairs")
        raw = np.stack([load_rgb(manifest.resolve(r.degraded_path), size) for r in pairs])
        ref = np.stack([load_rgb(manifest.resolve(r.reference_path), size) for r in pairs])
    s = cfg.noise_schedule()
    curve = score_curve(
        raw, ref, prompts, backend, s, cfg.seed, cfg.diagnose.stride,
        csv_path=run.outputs / "score_curve.csv", plot_path=run.figures / "score_curve.png",
    )
    tail = curve.t >= 0.9 * s.T
    return {
        "n_points": int(curve.t.size),
        "tail_mean_abs_diff": float(np.mean(np.abs(curve.diff[tail]))),
        "head_mean_abs_diff": float(np.mean(np.abs(curve.diff[curve.t <= 0.1 * s.T]))),
    }


COMMANDS = {
    "toy-data": cmd_toy_data,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "learn-prompts": cmd_learn_prompts,
    "finetune": cmd_finetune,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}

# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "deterministic": "deterministic",
    "max_steps": None,  # resolved per command
    "batch_size": None,
    "lam": "guidance.lambda",
    "tm": "guidance.t_m",
    "sampler": "sampler.kind",
    "steps": "sampler.ddim_steps",
    "eta": "sampler.ddim_eta",
    "prompt_steps": "prompts.steps",
    "backend": "prompts.backend",
    "stride": "diagnose.stride",
}
_PATH_FLAGS = ("manifest", "pool", "data", "prompts", "from", "model", "in", "raw", "ref")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwdiff", description="Guided diffusion for underwater image enhancement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat dotted-key config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", required=True, help="run directory")
    shared.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    shared.add_argument("-v", "--verbose", action="store_true")

    def add(name, help, *flags):
        sp = sub.add_parser(name, parents=[shared], help=help)
        for flag in flags:
            sp.add_argument(f"--{flag}", dest=flag)
        return sp

    sp = add("toy-data", "write a procedural toy corpus")
    sp.add_argument("--n-natural", type=int, default=96)
    sp.add_argument("--n-templates", type=int, default=8)
    add("synth", "build a color-transfer paired dataset", "manifest", "pool")
    sp = add("pretrain", "train the conditional denoiser", "data")
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp = add("learn-prompts", "fit the two classifier prompts", "data", "pool")
    sp.add_argument("--prompt-steps", type=int)
    sp.add_argument("--backend")
    sp = add("finetune", "guided fine-tuning over the truncated step range", "from", "data", "prompts")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--tm", type=float)
    sp.add_argument("--no-clip", action="store_true", help="disable the classifier term")
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp = add("enhance", "sample enhanced images", "model", "in", "prompts")
    sp.add_argument("--sampler", choices=("ddim", "ddpm"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--tm", type=float)
    sp.add_argument("--no-clip", action="store_true")
    sp.add_argument("--batch", type=int, default=16)
    add("evaluate", "score images listed in a manifest", "manifest")
    sp = add("diagnose", "classifier score of noised raw/reference images", "prompts", "raw", "ref", "data")
    sp.add_argument("--stride", type=int)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for kv in args.set:
        key, sep, val = kv.partition("=")
        if not sep:
            raise ConfigError([(kv, "expected KEY=VALUE")])
        values[key.strip()] = parse_value(val.strip())
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        if key is None:
            section = "finetune" if args.command == "finetune" else "pretrain"
            key = f"{section}.{dest}"
        values[key] = v
    if getattr(args, "no_clip", False):
        values["guidance.clip_enabled"] = False
    for name in _PATH_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[f"paths.{name}"] = str(Path(v).resolve())
    cfg = apply_overrides(cfg, values)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    run = RunDir(args.out)
    cfg = None
    try:
        cfg = resolve_config(args)
        run.open(cfg)
        log.info("uwdiff %s %s -> %s", __version__, args.command, run.root)
        t0 = time.perf_counter()
        results = COMMANDS[args.command](cfg, run, args)
        log.info("done in %.1f s", time.perf_counter() - t0)
        run.write_summary(args.command, cfg, "ok", results)
        return EXIT_OK
    except Exception as exc:
        category, code = _categorize(exc)
        if category == "internal":
            log.exception("unexpected failure")
        if isinstance(exc, ConfigError):
            for key, msg in exc.violations:
                print(f"config error: {key}: {msg}", file=sys.stderr)
        else:
            print(f"{category} error: {exc}", file=sys.stderr)
        run.write_summary(args.command, cfg, "error", error={"category": category, "message": str(exc)})
        return code
    finally:
        run.close()


if __name__ == "__main__":
    raise SystemExit(main())
