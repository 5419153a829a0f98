"""DDPM noise schedule and the closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Betas indexed by timestep ``t = 1..T`` (stored 0-based)."""

    betas: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if not (b[0] > 0 and b[-1] < 1 and np.all(np.diff(b) >= 0)):
            raise ValueError("betas must satisfy 0 < beta_1 <= ... <= beta_T < 1")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas_bar", np.cumprod(1.0 - b))

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64), beta_start, beta_end)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> torch.Tensor:
        """``alpha_bar_t`` for 1-based ``t`` (int or integer tensor), float64."""
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t.tolist()}")
        return torch.as_tensor(self.alphas_bar, dtype=torch.float64)[t.long() - 1]

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSchedule:
        if d.get("kind") != "linear":
            raise ValueError(f"unsupported schedule {d!r}")
        return cls.linear(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` is scalar or one entry per batch item."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = sched.alpha_bar(t).to(x0.dtype)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
