"""Training loop for the conditional noise predictor."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..datagen import DatasetManifest
from .model import ArchConfig, DiffusionModel
from .schedule import NoiseSchedule, forward_noise

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    lr: float = 1e-3
    gamma: float = 0.98
    batch_size: int = 128
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    arch: ArchConfig = field(default_factory=ArchConfig)
    encoder: str = "frozen-caption-transformer-v1:seed=0"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = ArchConfig.from_dict(d["arch"])
        return cls(**d)


def to_model_space(images: np.ndarray) -> torch.Tensor:
    """uint8 NHWC in [0, 255] to float NCHW in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def from_model_space(x: torch.Tensor) -> np.ndarray:
    x = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def noise_matching_loss(model: DiffusionModel, x0: torch.Tensor, encoding: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, v_h=None) -> torch.Tensor:
    x_t = forward_noise(x0, t, eps, model.schedule)
    return F.mse_loss(model.eps(x_t, t, encoding, v_h=v_h), eps)


def train(manifest: DatasetManifest, cfg: TrainConfig = TrainConfig(), seed: int = 0, images: np.ndarray | None = None, on_epoch=None) -> DiffusionModel:
    """Fit a fresh model on the manifest's image/caption pairs.

    ``images`` may be passed to skip reading PNGs. Loss is the mean squared
    error between true and predicted noise, averaged per epoch.
    """
    if len(manifest) == 0:
        raise ValueError("cannot train on an empty manifest")
    if images is None:
        images = manifest.load_images()
    schedule = NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    model = DiffusionModel.create(cfg.arch, schedule, cfg.encoder, seed=seed)

    captions = manifest.captions()
    unique = sorted(set(captions))
    cap_index = torch.tensor([unique.index(c) for c in captions])
    encodings = model.encode(unique)

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.denoiser.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.gamma)
    model.denoiser.train()
    n = len(captions)
    history = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x0 = to_model_space(images[idx.numpy()])
            t = torch.randint(1, cfg.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            loss = noise_matching_loss(model, x0, encodings[cap_index[idx]], t, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        sched.step()
        history.append(total / batches)
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    model.denoiser.requires_grad_(False).eval()
    model.provenance = {
        "dataset_spec_hash": manifest.spec_hash,
        "seed": seed,
        "epochs": cfg.epochs,
        "final_loss": history[-1],
        "loss_history": history,
        "train_config": cfg.to_dict(),
        "unreported_choices": {
            "batch_size": cfg.batch_size,
            "augmentation": "none",
            "init": "diffusers default",
        },
    }
    return model
