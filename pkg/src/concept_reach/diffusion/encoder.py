"""Frozen text encoders producing fixed-length ``(10, 512)`` prompt encodings."""

from __future__ import annotations

import torch
from torch import nn

from ..concepts import COLORS, SHAPES

MAX_TOKENS = 10
EMBED_DIM = 512

VOCAB = ("<pad>", "</s>", "<unk>", "a", "behind", "shape", *COLORS, *SHAPES)


class PromptTooLong(ValueError):
    pass


class FrozenCaptionEncoder(nn.Module):
    """Word-level tokenizer plus a small transformer encoder with fixed random weights.

    Stand-in for a pretrained T5-small encoder when those weights are not
    available. Weights are drawn from ``seed`` and never trained, so identical
    prompts always map to identical encodings.
    """

    def __init__(self, seed: int = 0, layers: int = 2, heads: int = 8):
        super().__init__()
        self.seed = seed
        self.index = {w: i for i, w in enumerate(VOCAB)}
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.embed = nn.Embedding(len(VOCAB), EMBED_DIM)
            self.pos = nn.Parameter(torch.randn(MAX_TOKENS, EMBED_DIM) * 0.1)
            layer = nn.TransformerEncoderLayer(EMBED_DIM, heads, dim_feedforward=1024, dropout=0.0, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, layers, norm=nn.LayerNorm(EMBED_DIM), enable_nested_tensor=False)
        finally:
            torch.random.set_rng_state(gen_state)
        self.requires_grad_(False)
        self.eval()

    @property
    def identifier(self) -> str:
        return f"frozen-caption-transformer-v1:seed={self.seed}"

    def tokenize(self, prompt: str) -> list[int]:
        words = prompt.lower().split()
        ids = [self.index.get(w, self.index["<unk>"]) for w in words] + [self.index["</s>"]]
        if len(ids) > MAX_TOKENS:
            raise PromptTooLong(f"prompt {prompt!r} needs {len(ids)} tokens, limit is {MAX_TOKENS}")
        return ids + [self.index["<pad>"]] * (MAX_TOKENS - len(ids))

    @torch.no_grad()
    def forward(self, prompts: list[str]) -> torch.Tensor:
        ids = torch.tensor([self.tokenize(p) for p in prompts], dtype=torch.long)
        return self.encoder(self.embed(ids) + self.pos)


class T5Encoder(nn.Module):
    """Frozen pretrained T5 encoder; needs ``transformers`` and local or hub weights."""

    def __init__(self, name_or_path: str = "t5-small"):
        super().__init__()
        from transformers import AutoTokenizer, T5EncoderModel

        self.name = name_or_path
        self.tokenizer = AutoTokenizer.from_pretrained(name_or_path)
        self.model = T5EncoderModel.from_pretrained(name_or_path)
        self.requires_grad_(False)
        self.eval()

    @property
    def identifier(self) -> str:
        return f"t5:{self.name}"

    @torch.no_grad()
    def forward(self, prompts: list[str]) -> torch.Tensor:
        for p in prompts:
            n = len(self.tokenizer(p).input_ids)
            if n > MAX_TOKENS:
                raise PromptTooLong(f"prompt {p!r} needs {n} tokens, limit is {MAX_TOKENS}")
        tok = self.tokenizer(prompts, padding="max_length", max_length=MAX_TOKENS, return_tensors="pt")
        return self.model(input_ids=tok.input_ids, attention_mask=tok.attention_mask).last_hidden_state


_CACHE: dict[str, nn.Module] = {}


def get_encoder(identifier: str = "frozen-caption-transformer-v1:seed=0") -> nn.Module:
    if identifier not in _CACHE:
        if identifier.startswith("frozen-caption-transformer-v1"):
            seed = int(identifier.split("seed=")[1]) if "seed=" in identifier else 0
            _CACHE[identifier] = FrozenCaptionEncoder(seed=seed)
        elif identifier.startswith("t5:"):
            _CACHE[identifier] = T5Encoder(identifier[3:])
        else:
            raise ValueError(f"unknown text encoder {identifier!r}")
    return _CACHE[identifier]


def encode_text(prompt: str, encoder: nn.Module | None = None) -> torch.Tensor:
    """Encoding of a single prompt, shape ``(10, 512)``."""
    encoder = encoder or get_encoder()
    return encoder([prompt])[0]
