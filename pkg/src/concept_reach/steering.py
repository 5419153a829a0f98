"""Steering vectors in the prompt-encoding space and the U-net bottleneck (h-space)."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .concepts import ConceptTuple
from .datagen import DatasetManifest, render_tuple
from .diffusion.encoder import EMBED_DIM, MAX_TOKENS
from .diffusion.model import DiffusionModel
from .diffusion.sampling import sample
from .diffusion.train import noise_matching_loss, to_model_space

log = logging.getLogger(__name__)

# keeps fresh concept-set renders disjoint from training-set substreams
CONCEPT_SET_SEED_OFFSET = 7_919_000


class Space(enum.Enum):
    PROMPT = "prompt"
    H = "h"


@dataclass
class SteeringVector:
    space: Space
    values: torch.Tensor
    y_s: str
    target: ConceptTuple
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.space = Space(self.space)
        self.values = self.values.detach().clone()
        shape = tuple(self.values.shape)
        if self.space is Space.PROMPT and shape != (MAX_TOKENS, EMBED_DIM):
            raise ValueError(f"prompt-space vectors are {MAX_TOKENS}x{EMBED_DIM}, got {shape}")
        if self.space is Space.H and len(shape) != 3:
            raise ValueError(f"h-space vectors are CxHxW bottleneck maps, got {shape}")
        self.diagnostics.setdefault("l2_norm", self.l2_norm)

    @property
    def l2_norm(self) -> float:
        return float(self.values.double().norm())

    @classmethod
    def zeros(cls, model: DiffusionModel, space: Space | str, y_s: str, target: ConceptTuple) -> SteeringVector:
        space = Space(space)
        shape = model.prompt_shape if space is Space.PROMPT else model.h_shape
        return cls(space, torch.zeros(shape), y_s, target, {"final_loss": None, "steps": 0})

    def check_compatible(self, model: DiffusionModel) -> None:
        expected = model.prompt_shape if self.space is Space.PROMPT else model.h_shape
        if tuple(self.values.shape) != tuple(expected):
            raise ValueError(f"{self.space.value}-space vector of shape {tuple(self.values.shape)} does not fit model ({expected})")

    def content_hash(self) -> str:
        h = hashlib.sha256(self.values.detach().cpu().float().numpy().tobytes())
        h.update(f"{self.space.value}|{self.y_s}|{self.target.key()}".encode())
        return h.hexdigest()[:12]

    def filename(self) -> str:
        return f"vec_{self.space.value}_{self.target.key().replace(':', '-')}_{self.content_hash()}.bin"

    def save(self, out_dir: str | Path, extra: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / self.filename()
        torch.save(self.values.cpu(), path)
        meta = {
            "file_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
            "space": self.space.value,
            "y_s": self.y_s,
            "target": self.target.key(),
            "shape": list(self.values.shape),
            "content_hash": self.content_hash(),
            **{k: v for k, v in self.diagnostics.items()},
            **(extra or {}),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> SteeringVector:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if hashlib.sha256(path.read_bytes()).hexdigest() != meta.get("file_sha256"):
            from .diffusion.model import IntegrityError

            raise IntegrityError(f"vector file {path} does not match its recorded file hash")
        values = torch.load(path, map_location="cpu", weights_only=True)
        diag_keys = ("final_loss", "trailing_loss", "l2_norm", "steps", "lr", "batch_size", "loss_history")
        vec = cls(Space(meta["space"]), values, meta["y_s"], ConceptTuple.from_key(meta["target"]), {k: meta[k] for k in diag_keys if k in meta})
        if vec.content_hash() != meta["content_hash"]:
            from .diffusion.model import IntegrityError

            raise IntegrityError(f"vector {path} does not match its recorded hash")
        return vec


@dataclass
class ConceptImageSet:
    images: np.ndarray  # (k, 64, 64, 3) uint8
    target: ConceptTuple
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def build_concept_set(target: ConceptTuple, k: int, seed: int = 0, source: DatasetManifest | None = None, allow_render: bool = True) -> ConceptImageSet:
    """Collect ``k`` images showing exactly ``target``.

    Images come from ``source`` first; any shortfall is rendered fresh with
    seeds disjoint from the training-set renders.
    """
    if k <= 0:
        raise ValueError("concept set size must be positive")
    images, refs = [], []
    if source is not None:
        for r in source.records:
            if len(images) == k:
                break
            if (r["c1"], r["s1"], r["c2"], r["s2"]) == tuple(target):
                from .datagen import load_png

                images.append(load_png(source.root / r["file"]))
                refs.append(r["id"])
    missing = k - len(images)
    if missing and not allow_render:
        raise ValueError(f"only {len(images)} images of {target} available, need {k}")
    for i in range(missing):
        images.append(render_tuple(target, i, CONCEPT_SET_SEED_OFFSET + seed)[0])
    return ConceptImageSet(
        np.stack(images),
        target,
        {"from_source": refs, "rendered": missing, "render_seed": CONCEPT_SET_SEED_OFFSET + seed},
    )


@dataclass(frozen=True)
class SteerConfig:
    steps: int = 5000
    lr: float = 0.02
    batch_size: int = 64
    window: int = 100
    seed: int = 0


def steering_loss(model: DiffusionModel, space: Space, vec: torch.Tensor, base_enc: torch.Tensor, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise-matching loss with the vector injected in its space."""
    enc = base_enc.expand(len(x0), *base_enc.shape)
    if space is Space.PROMPT:
        return noise_matching_loss(model, x0, enc + vec, t, eps)
    return noise_matching_loss(model, x0, enc, t, eps, v_h=vec)


def optimize_vector(model: DiffusionModel, space: Space | str, y_s: str, Z: ConceptImageSet, cfg: SteerConfig = SteerConfig()) -> SteeringVector:
    """Adam on a zero-initialised vector; the model weights stay frozen."""
    space = Space(space)
    dtype = next(model.denoiser.parameters()).dtype
    shape = model.prompt_shape if space is Space.PROMPT else model.h_shape
    vec = torch.zeros(shape, dtype=dtype, requires_grad=True)
    model.denoiser.requires_grad_(False).eval()
    base_enc = model.encode([y_s])[0]
    data = to_model_space(Z.images).to(dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam([vec], lr=cfg.lr)
    history: list[float] = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (min(cfg.batch_size, len(data)),), generator=gen)
        x0 = data[idx]
        t = torch.randint(1, model.schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        loss = steering_loss(model, space, vec, base_enc, x0, t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if step % 500 == 0:
            log.info("%s-space step %d loss %.5f", space.value, step, history[-1])
    tail = history[-cfg.window :]
    diagnostics = {
        "final_loss": history[-1] if history else None,
        "trailing_loss": float(np.mean(tail)) if tail else None,
        "steps": cfg.steps,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "loss_history": history,
    }
    return SteeringVector(space, vec.detach().float(), y_s, Z.target, diagnostics)


def steered_sample(model: DiffusionModel, vec: SteeringVector, n: int, seed: int, **kw) -> np.ndarray:
    return sample(model, vec.y_s, n, seed, intervention=vec, **kw)


def diagnostics_table(vectors: list[SteeringVector], accuracies: list[float]) -> list[dict]:
    if len(vectors) != len(accuracies):
        raise ValueError(f"{len(vectors)} vectors but {len(accuracies)} accuracies")
    return [
        {
            "space": v.space.value,
            "target": v.target.key(),
            "y_s": v.y_s,
            "final_loss": v.diagnostics.get("final_loss"),
            "trailing_loss": v.diagnostics.get("trailing_loss"),
            "l2_norm": v.l2_norm,
            "accuracy": a,
        }
        for v, a in zip(vectors, accuracies)
    ]


def spearman(x, y) -> float | None:
    """Spearman rank correlation, or None when undefined (fewer than 2 points or constant input)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    return float(stats.spearmanr(x, y).statistic)
