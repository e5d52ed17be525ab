"""Contextual text encoder mapping a tokenized prompt to per-token embeddings."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .text import PAD_ID, TokenizedPrompt


@dataclass
class EncoderConfig:
    vocab_size: int
    context_length: int = 16
    d_text: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4


@dataclass
class EmbeddingSequence:
    """Encoder output for one prompt; rows at ``length`` and beyond hold the pad embedding."""

    vectors: Tensor  # (L, d_text)
    length: int
    prompt: TokenizedPrompt | None = None

    def clone(self) -> "EmbeddingSequence":
        return EmbeddingSequence(self.vectors.clone(), self.length, self.prompt)


class _Block(nn.Module):
    def __init__(self, d: int, heads: int, ff_mult: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, x: Tensor, key_valid: Tensor) -> Tensor:
        B, L, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = (z.view(B, L, h, d // h).transpose(1, 2) for z in (q, k, v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(B, L, d))
        return x + self.ff(self.ln2(x))


class TextEncoder(nn.Module):
    """Bidirectional transformer over the closed vocabulary.

    Pad positions are excluded from attention keys, so valid rows do not
    depend on anything in the pad region.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_text
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Parameter(torch.zeros(config.context_length, d))
        self.blocks = nn.ModuleList(
            _Block(d, config.n_heads, config.ff_mult) for _ in range(config.n_layers)
        )
        self.ln_final = nn.LayerNorm(d)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        nn.init.normal_(self.position_embedding, std=0.1)

    @property
    def d_text(self) -> int:
        return self.config.d_text

    def forward(self, ids: Tensor, lengths: Tensor) -> Tensor:
        """ids (B, L) long, lengths (B,) -> (B, L, d_text)."""
        L = ids.shape[1]
        valid = torch.arange(L, device=ids.device)[None, :] < lengths[:, None]
        x = self.token_embedding(ids) + self.position_embedding[:L]
        for block in self.blocks:
            x = block(x, valid)
        x = self.ln_final(x)
        pad = self.token_embedding.weight[PAD_ID].expand_as(x)
        return torch.where(valid[..., None], x, pad)

    def encode_batch(self, prompts: Sequence[TokenizedPrompt]) -> Tensor:
        device = self.position_embedding.device
        ids = torch.tensor([p.ids for p in prompts], dtype=torch.long, device=device)
        lengths = torch.tensor([p.length for p in prompts], dtype=torch.long, device=device)
        return self(ids, lengths)


def encode(encoder: TextEncoder, prompt: TokenizedPrompt) -> EmbeddingSequence:
    return EmbeddingSequence(encoder.encode_batch([prompt])[0], prompt.length, prompt)


def clone_params(encoder: TextEncoder) -> TextEncoder:
    return copy.deepcopy(encoder)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def valid_mask(prompts: Sequence[TokenizedPrompt], device=None) -> Tensor:
    L = len(prompts[0].ids)
    lengths = torch.tensor([p.length for p in prompts], device=device)
    return torch.arange(L, device=device)[None, :] < lengths[:, None]
