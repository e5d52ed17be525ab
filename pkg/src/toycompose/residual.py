"""Subject residuals: fine-tune a copy of the text encoder, then average its shift.

The copy is trained on the subject's few images with the noise-prediction
loss while a preservation term keeps every non-subject token embedding close
to the frozen encoder's output.  The residual is the mean change of the
subject token's embedding over a sentence corpus.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .diffusion import Denoiser, NoiseSchedule, NumericalError, forward_diffuse
from .encoder import TextEncoder, clone_params
from .text import PromptCorpus, TokenizedPrompt, Vocabulary, subject_positions, tokenize
from .toyworld import SubjectDataset

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    steps: int = 1000
    batch_size: int = 4
    # L_sub is a per-image squared norm (768 terms at 3x16x16), so 10 here
    # weighs the two terms like 0.013 would against a per-pixel mean.
    lam: float = 10.0
    corpus_size: int = 200
    corpus_batch: int = 8
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.0
    freeze_token_embedding: bool = False
    # Also pin the non-subject slots of the training caption itself.  Without
    # it the encoder is free to store the subject in "photo" or "of" of that
    # one sentence, which the corpus-averaged residual never sees.
    regularize_caption: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.corpus_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# The full-scale fine-tuning recipe; far too slow to move a desk-scale model.
REFERENCE_RECIPE = TrainingConfig(lr=1e-6, steps=3000, batch_size=1, optimizer="sgd")


@dataclass
class ResidualEmbedding:
    subject: str
    base_category: str
    delta: Tensor  # (d_text,)
    fingerprint: dict = field(default_factory=dict)


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Disable gradients for a module's parameters inside the block."""
    prev = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), prev):
            p.requires_grad_(flag)


def _batch(prompts: Sequence[TokenizedPrompt]):
    ids = torch.tensor([p.ids for p in prompts], dtype=torch.long)
    lengths = torch.tensor([p.length for p in prompts], dtype=torch.long)
    valid = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
    return ids, lengths, valid


def subject_loss(
    denoiser: Denoiser,
    enc_custom: TextEncoder,
    images: Tensor,
    prompt: TokenizedPrompt,
    t: Tensor,
    eps: Tensor,
    schedule: NoiseSchedule,
) -> Tensor:
    """Squared L2 noise-prediction error per image, averaged over the batch.

    Gradients reach the encoder only.
    """
    ids, lengths, valid = _batch([prompt] * images.shape[0])
    ctx = enc_custom(ids, lengths)
    x_t = forward_diffuse(images, t, eps, schedule)
    with frozen(denoiser):
        pred = denoiser(x_t, t, ctx.to(images.dtype), valid)
    return ((pred - eps) ** 2).flatten(1).sum(-1).mean()


def content_positions(prompt: TokenizedPrompt, excluded: Sequence[int]) -> list[int]:
    """Word slots (no begin/end/pad) minus the excluded indices."""
    skip = set(excluded)
    return [i for i in range(1, prompt.length - 1) if i not in skip]


def embedding_preservation_loss(
    enc_custom: TextEncoder,
    enc_base: TextEncoder,
    corpus: PromptCorpus,
    base_embeddings: Tensor | None = None,
) -> Tensor:
    """Mean over sentences of summed squared drift at non-subject word slots.

    ``base_embeddings`` may carry precomputed frozen-encoder outputs for the
    same sentences.
    """
    for prompt, pos in zip(corpus.sentences, corpus.subject_positions):
        if not pos:
            raise ValueError(f"sentence lacks the subject token {corpus.base_category!r}: {prompt.text!r}")
    ids, lengths, _ = _batch(corpus.sentences)
    custom = enc_custom(ids, lengths)
    if base_embeddings is None:
        with torch.no_grad():
            base_embeddings = enc_base(ids, lengths)
    mask = torch.zeros(custom.shape[:2], dtype=custom.dtype)
    for i, (prompt, pos) in enumerate(zip(corpus.sentences, corpus.subject_positions)):
        mask[i, content_positions(prompt, pos)] = 1.0
    sq = ((custom - base_embeddings) ** 2).sum(-1)
    return (sq * mask).sum(-1).mean()


def total_loss(l_sub: Tensor | float, l_reg: Tensor | float, lam: float):
    return l_sub + lam * l_reg


@dataclass
class TrainingLog:
    total: list[float] = field(default_factory=list)
    sub: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"step": i, "total": a, "sub": b, "reg": c}) + "\n"
            for i, (a, b, c) in enumerate(zip(self.total, self.sub, self.reg))
        )


def _dataset_tensor(dataset: SubjectDataset, dtype) -> Tensor:
    return torch.as_tensor(np.asarray(dataset.images), dtype=dtype)


def train_custom_encoder(
    enc_base: TextEncoder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    dataset: SubjectDataset,
    corpus: PromptCorpus,
    config: TrainingConfig,
    vocab: Vocabulary,
) -> tuple[TextEncoder, TrainingLog]:
    """Gradient descent on L_sub + lam * L_reg over a clone of ``enc_base``."""
    enc_custom = clone_params(enc_base)
    history = TrainingLog()
    if config.steps == 0:
        return enc_custom, history
    dtype = next(denoiser.parameters()).dtype
    images = _dataset_tensor(dataset, dtype)
    prompt = tokenize(dataset.caption, vocab)
    params = [
        p
        for name, p in enc_custom.named_parameters()
        if not (config.freeze_token_embedding and name.startswith("token_embedding"))
    ]
    enc_custom.requires_grad_(True)
    if config.freeze_token_embedding:
        enc_custom.token_embedding.requires_grad_(False)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")

    n_corpus = len(corpus)
    if config.regularize_caption:
        caption_pos = tuple(subject_positions(prompt, corpus.base_category, vocab))
        if not caption_pos:
            raise ValueError(f"caption {prompt.text!r} lacks the corpus category {corpus.base_category!r}")
        corpus = PromptCorpus(
            corpus.base_category, corpus.sentences + (prompt,), corpus.subject_positions + (caption_pos,)
        )
    ids, lengths, _ = _batch(corpus.sentences)
    with torch.no_grad():
        base_all = enc_base(ids, lengths)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    n = images.shape[0]
    for step in range(config.steps):
        idx = torch.as_tensor(rng.integers(0, n, size=config.batch_size))
        x0 = images[idx]
        t = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        l_sub = subject_loss(denoiser, enc_custom, x0, prompt, t, eps, schedule)
        pick = rng.choice(n_corpus, size=min(config.corpus_batch, n_corpus), replace=False)
        if config.regularize_caption:
            pick = np.append(pick, n_corpus)
        l_reg = embedding_preservation_loss(enc_custom, enc_base, corpus.subset(pick), base_all[pick])
        loss = total_loss(l_sub, l_reg, config.lam)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite residual-training loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.total.append(loss.item())
        history.sub.append(l_sub.item())
        history.reg.append(l_reg.item())
        if step % 100 == 0:
            log.info("residual step %d sub %.5f reg %.5f", step, history.sub[-1], history.reg[-1])
    return enc_custom, history


def evaluate_subject_loss(
    denoiser: Denoiser,
    encoder: TextEncoder,
    schedule: NoiseSchedule,
    dataset: SubjectDataset,
    vocab: Vocabulary,
    draws: int = 64,
    seed: int = 1234,
) -> float:
    """L_sub averaged over a fixed set of (image, t, noise) draws."""
    dtype = next(denoiser.parameters()).dtype
    images = _dataset_tensor(dataset, dtype)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(0, images.shape[0], (draws,), generator=gen)
    t = torch.randint(1, schedule.T + 1, (draws,), generator=gen)
    eps = torch.randn((draws,) + tuple(images.shape[1:]), generator=gen, dtype=dtype)
    with torch.no_grad():
        return float(subject_loss(denoiser, encoder, images[idx], tokenize(dataset.caption, vocab), t, eps, schedule))


def extract_residual(
    enc_base: TextEncoder,
    enc_custom: TextEncoder,
    corpus: PromptCorpus,
    base_category: str,
    subject: str | None = None,
    fingerprint: dict | None = None,
) -> ResidualEmbedding:
    """Mean of (custom - base) subject-token embeddings over every occurrence."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    ids, lengths, _ = _batch(corpus.sentences)
    with torch.no_grad():
        diff = (enc_custom(ids, lengths) - enc_base(ids, lengths)).double()
    total = torch.zeros(diff.shape[-1], dtype=torch.float64)
    count = 0
    for i, pos in enumerate(corpus.subject_positions):
        if not pos:
            raise ValueError(f"sentence lacks {base_category!r}: {corpus.sentences[i].text!r}")
        total += diff[i, list(pos)].sum(0)
        count += len(pos)
    delta = (total / count).float()
    return ResidualEmbedding(subject or base_category, base_category, delta, dict(fingerprint or {}))


def embedding_drift(enc_base: TextEncoder, enc_custom: TextEncoder, corpus: PromptCorpus) -> tuple[float, float]:
    """(mean drift norm at subject slots, mean drift norm at other word slots)."""
    ids, lengths, _ = _batch(corpus.sentences)
    with torch.no_grad():
        norms = (enc_custom(ids, lengths) - enc_base(ids, lengths)).norm(dim=-1)
    subj, other = [], []
    for i, (prompt, pos) in enumerate(zip(corpus.sentences, corpus.subject_positions)):
        subj.extend(norms[i, list(pos)].tolist())
        other.extend(norms[i, content_positions(prompt, pos)].tolist())
    return float(np.mean(subj)), float(np.mean(other)) if other else 0.0
