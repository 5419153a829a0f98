"""Conditional U-net noise predictor with prompt-space and h-space injection points."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from diffusers import UNet2DConditionModel
from torch import nn

from .encoder import EMBED_DIM, MAX_TOKENS, get_encoder
from .schedule import NoiseSchedule


class IntegrityError(RuntimeError):
    """A stored artifact does not match the hash recorded for it."""


@dataclass(frozen=True)
class ArchConfig:
    block_out_channels: tuple[int, ...] = (16, 32, 64, 128)
    layers_per_block: int = 2
    norm_num_groups: int = 8
    attention_head_dim: int = 8
    cross_attention_dim: int = EMBED_DIM
    sample_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        d["block_out_channels"] = tuple(d["block_out_channels"])
        return cls(**d)


def build_unet(arch: ArchConfig) -> UNet2DConditionModel:
    n = len(arch.block_out_channels)
    return UNet2DConditionModel(
        sample_size=arch.sample_size,
        in_channels=3,
        out_channels=3,
        block_out_channels=arch.block_out_channels,
        layers_per_block=arch.layers_per_block,
        down_block_types=("DownBlock2D",) * n,
        up_block_types=("UpBlock2D",) * n,
        mid_block_type="UNetMidBlock2DCrossAttn",
        cross_attention_dim=arch.cross_attention_dim,
        norm_num_groups=arch.norm_num_groups,
        attention_head_dim=arch.attention_head_dim,
    )


class Denoiser(nn.Module):
    """``eps_theta(x_t, t, encoding)`` with an optional additive h-space vector.

    The h-space vector is added to the mid-block output; the value after
    injection can be captured for inspection.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.unet = build_unet(arch)
        self._h_delta: torch.Tensor | None = None
        self._capture = False
        self.captured_h: torch.Tensor | None = None
        self.unet.mid_block.register_forward_hook(self._mid_hook)

    def _mid_hook(self, module, inputs, output):
        if self._h_delta is not None:
            output = output + self._h_delta
        if self._capture:
            self.captured_h = output
        return output

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, encoding: torch.Tensor, v_h: torch.Tensor | None = None, capture_h: bool = False) -> torch.Tensor:
        self._h_delta = v_h
        self._capture = capture_h
        try:
            return self.unet(x_t, t, encoder_hidden_states=encoding).sample
        finally:
            self._h_delta = None
            self._capture = False

    @property
    def h_shape(self) -> tuple[int, int, int]:
        side = self.arch.sample_size // 2 ** (len(self.arch.block_out_channels) - 1)
        return (self.arch.block_out_channels[-1], side, side)


@dataclass
class DiffusionModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    encoder_id: str
    provenance: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: ArchConfig = ArchConfig(), schedule: NoiseSchedule | None = None, encoder_id: str | None = None, seed: int = 0) -> DiffusionModel:
        torch.manual_seed(seed)
        encoder_id = encoder_id or get_encoder().identifier
        return cls(Denoiser(arch), schedule or NoiseSchedule.linear(), encoder_id)

    @property
    def encoder(self) -> nn.Module:
        return get_encoder(self.encoder_id)

    @property
    def arch(self) -> ArchConfig:
        return self.denoiser.arch

    @property
    def h_shape(self) -> tuple[int, int, int]:
        return self.denoiser.h_shape

    @property
    def prompt_shape(self) -> tuple[int, int]:
        return (MAX_TOKENS, self.arch.cross_attention_dim)

    def encode(self, prompts: list[str]) -> torch.Tensor:
        dtype = next(self.denoiser.parameters()).dtype
        return self.encoder(prompts).to(dtype)

    def eps(self, x_t, t, encoding, v_h=None, capture_h=False) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        return self.denoiser(x_t, t, encoding, v_h=v_h, capture_h=capture_h)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.denoiser.parameters())

    def weights_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.denoiser.state_dict(), buf)
        return buf.getvalue()

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.denoiser.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        blob = self.weights_bytes()
        (out / "weights.bin").write_bytes(blob)
        meta = {
            "file_sha256": hashlib.sha256(blob).hexdigest(),
            "architecture": asdict(self.arch),
            "schedule": self.schedule.to_dict(),
            "encoder": self.encoder_id,
            "weights_sha256": self.weights_hash(),
            **self.provenance,
        }
        (out / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> DiffusionModel:
        ckpt = Path(ckpt_dir)
        if not (ckpt / "model.json").exists():
            raise FileNotFoundError(f"no checkpoint at {ckpt}; produce one with `concept-reach train`")
        meta = json.loads((ckpt / "model.json").read_text())
        arch = ArchConfig.from_dict(meta.pop("architecture"))
        schedule = NoiseSchedule.from_dict(meta.pop("schedule"))
        encoder_id = meta.pop("encoder")
        expected = meta.pop("weights_sha256")
        # the file hash catches byte edits that still decode to the same tensors
        if hashlib.sha256((ckpt / "weights.bin").read_bytes()).hexdigest() != meta.pop("file_sha256", None):
            raise IntegrityError(f"weights file in {ckpt} does not match its recorded file hash")
        denoiser = Denoiser(arch)
        state = torch.load(ckpt / "weights.bin", map_location="cpu", weights_only=True)
        denoiser.load_state_dict(state)
        denoiser.requires_grad_(False).eval()
        model = cls(denoiser, schedule, encoder_id, meta)
        if model.weights_hash() != expected:
            raise IntegrityError(f"weights in {ckpt} do not match model.json hash {expected}")
        return model


def h_activation(model: DiffusionModel, x_t: torch.Tensor, t, y: str | list[str], v_h: torch.Tensor | None = None) -> torch.Tensor:
    """Bottleneck (post mid-block) activation where h-space vectors are injected."""
    prompts = [y] * x_t.shape[0] if isinstance(y, str) else list(y)
    with torch.no_grad():
        model.eps(x_t, t, model.encode(prompts), v_h=v_h, capture_h=True)
    h = model.denoiser.captured_h
    model.denoiser.captured_h = None
    return h
