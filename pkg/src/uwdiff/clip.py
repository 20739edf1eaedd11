"""Two-prompt natural/underwater classifier over a frozen vision-language backbone.

Backends expose ``encode_image`` (``(B, 3, H, W)`` in [0, 1] -> unit vectors),
``encode_prompt`` (``(K, N, E)`` token embeddings -> unit vectors) and
``tokenize_init`` (text -> ``(N, E)``). Backbone weights are never trained; only
the two prompt matrices are.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, q_sample

log = logging.getLogger(__name__)

CONTEXT_LENGTH = 77


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _word_vector(word: str, dim: int) -> torch.Tensor:
    seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=g) / dim**0.5


class ToyBackend(nn.Module):
    """Small deterministic stand-in backbone built from frozen random projections.

    The image tower resizes to ``input_size``, subtracts 0.5, runs optional tanh
    hidden layers and projects to ``embed_dim``. With ``hidden=()`` it is linear
    up to the final normalization. The text tower is a position-weighted token sum
    followed by a linear projection.
    """

    def __init__(self, seed: int = 0, token_dim: int = 64, embed_dim: int = 32, input_size: int = 32, hidden=()):
        super().__init__()
        self.seed, self.token_dim, self.embed_dim, self.input_size = seed, token_dim, embed_dim, input_size
        self.hidden = tuple(hidden)
        g = torch.Generator().manual_seed(seed)
        dims = [3 * input_size * input_size, *self.hidden, embed_dim]
        self.image_layers = nn.ParameterList(
            [nn.Parameter(torch.randn(a, b, generator=g) / a**0.5) for a, b in zip(dims[:-1], dims[1:])]
        )
        self.pos_weight = nn.Parameter(torch.rand(CONTEXT_LENGTH, generator=g) + 0.5)
        self.text_proj = nn.Parameter(torch.randn(token_dim, embed_dim, generator=g) / token_dim**0.5)
        self.requires_grad_(False)
        self.eval()

    @property
    def backend_id(self) -> str:
        hid = "-".join(map(str, self.hidden)) or "none"
        return f"toy:seed={self.seed},token_dim={self.token_dim},embed_dim={self.embed_dim},input_size={self.input_size},hidden={hid}"

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.input_size or images.shape[-2] != self.input_size:
            images = F.interpolate(images, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        h = (images - 0.5).flatten(1)
        for i, w in enumerate(self.image_layers):
            h = h @ w.to(h.dtype)
            if i < len(self.image_layers) - 1:
                h = torch.tanh(h)
        return _unit(h)

    def encode_prompt(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[-2]
        pooled = (tokens * self.pos_weight[:n, None].to(tokens.dtype)).sum(-2)
        return _unit(pooled @ self.text_proj.to(tokens.dtype))

    def tokenize_init(self, text: str) -> torch.Tensor:
        words = ["<sot>", *re.findall(r"\w+", text.lower()), "<eot>"][:CONTEXT_LENGTH]
        out = torch.zeros(CONTEXT_LENGTH, self.token_dim)
        for i, w in enumerate(words):
            out[i] = _word_vector(w, self.token_dim)
        return out


class HFClipBackend(nn.Module):
    """Frozen CLIP from ``transformers`` fed with learnable token embeddings.

    The prompt feature is read at the last sequence position (the causal mask lets
    it attend to every token), projected and normalized.
    """

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model, tokenizer=None, name: str = "custom"):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.name = name
        self.model.requires_grad_(False)
        self.model.eval()
        self.token_dim = model.config.text_config.hidden_size
        self.embed_dim = model.config.projection_dim
        self.input_size = model.config.vision_config.image_size

    @classmethod
    def from_pretrained(cls, path):
        from transformers import CLIPModel, CLIPTokenizer

        return cls(CLIPModel.from_pretrained(path), CLIPTokenizer.from_pretrained(path), name=str(path))

    @property
    def backend_id(self) -> str:
        return f"hf:{self.name}"

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(images, size=(self.input_size, self.input_size), mode="bicubic", align_corners=False)
        mean = torch.tensor(self.MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.STD, dtype=x.dtype).view(1, 3, 1, 1)
        out = self.model.vision_model(pixel_values=(x - mean) / std)
        return _unit(self.model.visual_projection(out.pooler_output))

    def encode_prompt(self, tokens: torch.Tensor) -> torch.Tensor:
        text = self.model.text_model
        n = tokens.shape[-2]
        hidden = text.embeddings(inputs_embeds=tokens)
        mask = torch.full((n, n), float("-inf"), dtype=hidden.dtype).triu(1)[None, None]
        out = text.encoder(inputs_embeds=hidden, attention_mask=mask)
        last = out.last_hidden_state if hasattr(out, "last_hidden_state") else out[0]
        last = text.final_layer_norm(last)
        return _unit(self.model.text_projection(last[:, -1]))

    def tokenize_init(self, text: str) -> torch.Tensor:
        cfg = self.model.config.text_config
        if self.tokenizer is not None:
            ids = self.tokenizer(text, padding="max_length", max_length=CONTEXT_LENGTH, truncation=True,
                                 return_tensors="pt")["input_ids"][0]
        else:
            # no tokenizer available: hash words into the vocabulary
            words = re.findall(r"\w+", text.lower())
            bos, eos = cfg.bos_token_id % cfg.vocab_size, cfg.eos_token_id % cfg.vocab_size
            ids = [bos] + [int.from_bytes(hashlib.sha256(w.encode()).digest()[:4], "little") % cfg.vocab_size for w in words]
            ids = torch.tensor((ids + [eos] * CONTEXT_LENGTH)[:CONTEXT_LENGTH])
        ids = ids[: min(CONTEXT_LENGTH, cfg.max_position_embeddings)]
        with torch.no_grad():
            return self.model.text_model.embeddings.token_embedding(ids).clone()


def make_backend(spec: str):
    """Build a backend from its id string (``toy:...`` or ``hf:<path>``)."""
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        kw = {}
        for part in filter(None, rest.split(",")):
            k, _, v = part.partition("=")
            if k == "hidden":
                kw[k] = () if v in ("", "none") else tuple(int(h) for h in v.split("-"))
            else:
                kw[k] = int(v)
        return ToyBackend(**kw)
    if kind == "hf":
        return HFClipBackend.from_pretrained(rest)
    raise ValueError(f"unknown backend spec {spec!r}")


def backend_digest(backend: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(backend.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class PromptPair:
    T_n: torch.Tensor
    T_u: torch.Tensor
    backend_id: str = ""
    steps: int = 0

    def __post_init__(self):
        if self.T_n.shape != self.T_u.shape or self.T_n.shape[0] != CONTEXT_LENGTH:
            raise ValueError(f"prompts must both be {CONTEXT_LENGTH} x E, got {tuple(self.T_n.shape)}, {tuple(self.T_u.shape)}")

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.T_n, self.T_u])

    def swapped(self) -> "PromptPair":
        return PromptPair(self.T_u.clone(), self.T_n.clone(), self.backend_id, self.steps)

    def save(self, path) -> Path:
        """Write the matrices to ``<path>`` (npz) and metadata to ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, T_n=self.T_n.numpy(), T_u=self.T_u.numpy())
        meta = {"N": self.T_n.shape[0], "E": self.T_n.shape[1], "backend_id": self.backend_id, "steps": self.steps}
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PromptPair":
        path = Path(path)
        meta_path = path.with_name(path.name + ".json")
        if not path.exists() or not meta_path.exists():
            raise FileNotFoundError(f"prompt blob or metadata missing: {path}")
        meta = json.loads(meta_path.read_text())
        with np.load(path) as z:
            T_n, T_u = torch.from_numpy(z["T_n"]), torch.from_numpy(z["T_u"])
        if tuple(T_n.shape) != (meta["N"], meta["E"]):
            raise ValueError(f"prompt shape {tuple(T_n.shape)} disagrees with metadata N={meta['N']}, E={meta['E']}")
        return cls(T_n, T_u, meta["backend_id"], meta["steps"])


def init_prompts(text_natural: str, text_underwater: str, backend) -> PromptPair:
    if not text_natural.strip() or not text_underwater.strip():
        raise ValueError("prompt texts must be non-empty")
    return PromptPair(backend.tokenize_init(text_natural), backend.tokenize_init(text_underwater), backend.backend_id)


def as_batch(images) -> torch.Tensor:
    """Accept ``(H, W, 3)``/``(N, H, W, 3)`` arrays or ``(N, 3, H, W)`` tensors in [0, 1]."""
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images[None]
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def cosines(images: torch.Tensor, prompts: PromptPair, backend, text_feats: torch.Tensor | None = None) -> torch.Tensor:
    """``(B, 2)`` cosine similarities against (natural, underwater) prompts."""
    img = backend.encode_image(images)
    if text_feats is None:
        text_feats = backend.encode_prompt(prompts.stacked().to(img.dtype))
    return img @ text_feats.to(img.dtype).T


def predict_prob(image, prompts: PromptPair, backend):
    """Softmax over the two cosines: returns ``(p_natural, p_underwater)``.

    Scalars for a single image, numpy arrays for a batch.
    """
    batch = as_batch(image)
    with torch.no_grad():
        p = torch.softmax(cosines(batch, prompts, backend).double(), dim=1).numpy()
    if batch.shape[0] == 1 and (not isinstance(image, torch.Tensor) or image.ndim == 3):
        return float(p[0, 0]), float(p[0, 1])
    return p[:, 0], p[:, 1]


def clip_loss(image, prompts: PromptPair, backend):
    """Underwater-prompt probability of the image (the classifier output used for guidance)."""
    p_n, p_u = predict_prob(image, prompts, backend)
    return p_u


def to_classifier_input(x: torch.Tensor) -> torch.Tensor:
    """Model space [-1, 1] -> image space, clamped to [0, 1]."""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def clip_log_grad(x: torch.Tensor, prompts: PromptPair, backend, space: str = "model") -> torch.Tensor:
    """Gradient of ``log p_underwater`` with respect to ``x`` (per image in a batch).

    ``space="model"`` maps ``x`` from [-1, 1] to [0, 1] with clamping first;
    ``space="image"`` feeds ``x`` to the backbone as is.
    """
    x = x.detach().clone().requires_grad_(True)
    img = to_classifier_input(x) if space == "model" else x
    with torch.no_grad():
        text = backend.encode_prompt(prompts.stacked().to(x.dtype))
    logp_u = torch.log_softmax(cosines(img, prompts, backend, text), dim=1)[:, 1]
    (grad,) = torch.autograd.grad(logp_u.sum(), x)
    return grad


def train_prompts(
    natural_set,
    underwater_set,
    prompts: PromptPair,
    backend,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int | None = None,
    history: list | None = None,
) -> PromptPair:
    """Fit the two prompt matrices with binary cross-entropy (natural = 1, underwater = 0)."""
    nat, und = as_batch(natural_set), as_batch(underwater_set)
    if len(nat) == 0 or len(und) == 0:
        raise ValueError("both image sets must be non-empty")
    with torch.no_grad():
        feats = torch.cat([backend.encode_image(nat), backend.encode_image(und)])
    q = torch.cat([torch.ones(len(nat)), torch.zeros(len(und))]).double()
    T = prompts.stacked().clone().requires_grad_(True)
    opt = torch.optim.Adam([T], lr=lr)
    g = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randperm(len(q), generator=g)[:batch_size] if batch_size else slice(None)
        text = backend.encode_prompt(T)
        logits = (feats[idx] @ text.T).double()
        logp = torch.log_softmax(logits, dim=1)
        loss = -(q[idx] * logp[:, 0] + (1 - q[idx]) * logp[:, 1]).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite prompt loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if history is not None:
            history.append(loss.item())
    T = T.detach()
    return PromptPair(T[0].clone(), T[1].clone(), prompts.backend_id or backend.backend_id, prompts.steps + steps)


def prompt_accuracy(natural_set, underwater_set, prompts: PromptPair, backend) -> float:
    p_nat, _ = predict_prob(as_batch(natural_set), prompts, backend)
    p_und, _ = predict_prob(as_batch(underwater_set), prompts, backend)
    correct = np.sum(np.atleast_1d(p_nat) > 0.5) + np.sum(np.atleast_1d(p_und) < 0.5)
    return float(correct) / (np.size(p_nat) + np.size(p_und))


@dataclass
class ScoreCurve:
    t: np.ndarray
    score_raw: np.ndarray
    score_ref: np.ndarray
    diff: np.ndarray = field(init=False)

    def __post_init__(self):
        self.diff = self.score_raw - self.score_ref

    def records(self):
        return [
            {"t": int(t), "score_raw": float(a), "score_ref": float(b), "diff": float(d)}
            for t, a, b, d in zip(self.t, self.score_raw, self.score_ref, self.diff)
        ]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["t", "score_raw", "score_ref", "diff"])
            w.writeheader()
            w.writerows(self.records())
        return path


def score_curve(
    raw,
    ref,
    prompts: PromptPair,
    backend,
    s: NoiseSchedule,
    seed: int = 0,
    stride: int = 10,
    csv_path=None,
    plot_path=None,
) -> ScoreCurve:
    """Natural-prompt probability of noised raw/reference images along the forward process.

    Both images share the same noise draw at every ``t``; batches are averaged.
    The grid is ``0, stride, 2*stride, ...`` and always ends at ``T``.
    """
    raw_b, ref_b = as_batch(raw).double() * 2 - 1, as_batch(ref).double() * 2 - 1
    if raw_b.shape != ref_b.shape:
        raise ValueError(f"raw and reference shapes differ: {tuple(raw_b.shape)} vs {tuple(ref_b.shape)}")
    grid = list(range(0, s.T + 1, stride))
    if grid[-1] != s.T:
        grid.append(s.T)
    g = torch.Generator().manual_seed(seed)
    sr, sf = [], []
    with torch.no_grad():
        text = backend.encode_prompt(prompts.stacked().double())
        for t in grid:
            eps = torch.randn(raw_b.shape, generator=g, dtype=torch.float64)
            p = []
            for x0 in (raw_b, ref_b):
                xt = q_sample(x0, t, eps, s)
                c = cosines(to_classifier_input(xt), prompts, backend, text)
                p.append(torch.softmax(c.double(), dim=1)[:, 0].mean().item())
            sr.append(p[0])
            sf.append(p[1])
    curve = ScoreCurve(np.array(grid), np.array(sr), np.array(sf))
    if csv_path is not None:
        curve.write_csv(csv_path)
    if plot_path is not None:
        from .plotting import plot_score_curve

        plot_score_curve(curve, plot_path, T=s.T)
    return curve
