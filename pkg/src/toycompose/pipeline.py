"""End-to-end helpers shared by the command line, demos and acceptance runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint, state_checksum
from .config import RunConfig
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, make_schedule, pretrain_base
from .encoder import EncoderConfig, TextEncoder
from .registry import RegistryEntry
from .residual import embedding_drift, evaluate_subject_loss, extract_residual, train_custom_encoder
from .text import Vocabulary, default_vocabulary, generate_corpus, load_template_bank, tokenize
from .toyworld import ShapeSpec, make_scene_dataset, make_subject_dataset

log = logging.getLogger(__name__)


@dataclass
class Models:
    encoder: TextEncoder
    denoiser: Denoiser
    schedule: NoiseSchedule
    vocab: Vocabulary
    config: RunConfig
    losses: list | None = None

    def checksum(self) -> str:
        return state_checksum(self.denoiser)[:16] + state_checksum(self.encoder)[:16]


def build_models(cfg: RunConfig, vocab: Vocabulary | None = None) -> Models:
    vocab = vocab or default_vocabulary()
    m = cfg.model
    torch.manual_seed(cfg.seed)
    encoder = TextEncoder(
        EncoderConfig(len(vocab), m.context_length, m.d_text, m.text_layers, m.text_heads)
    )
    denoiser = Denoiser(
        DenoiserConfig(3, m.image_size, m.channels, m.d_text, m.attn_heads, cfg.schedule.T)
    )
    return Models(encoder, denoiser, make_schedule(cfg.schedule.T, cfg.schedule.kind), vocab, cfg)


def pretrain(cfg: RunConfig, progress=None) -> Models:
    models = build_models(cfg)
    size = cfg.model.image_size
    data = make_scene_dataset(cfg.data.n_scenes, seed=cfg.data.seed, canvas=(size, size))
    captions = [tokenize(c, models.vocab, cfg.model.context_length) for c in data.captions]
    result = pretrain_base(
        torch.as_tensor(data.images),
        captions,
        models.encoder,
        models.denoiser,
        models.schedule,
        tokenize("", models.vocab, cfg.model.context_length),
        cfg.pretrain,
        progress=progress,
    )
    models.losses = result.losses
    return models


def save_models(path, models: Models, extra: dict | None = None) -> str:
    tensors = {f"encoder.{k}": v for k, v in models.encoder.state_dict().items()}
    tensors.update({f"denoiser.{k}": v for k, v in models.denoiser.state_dict().items()})
    manifest = {
        "config": models.config.to_dict(),
        "config_hash": models.config.digest(),
        "model_hash": models.config.model_digest(),
        "vocab": models.vocab.tokens,
        "checksum": models.checksum(),
    }
    manifest.update(extra or {})
    save_checkpoint(path, tensors, manifest)
    return manifest["checksum"]


def load_models(path) -> tuple[Models, dict]:
    tensors, manifest = load_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    models = build_models(cfg, vocab)
    models.encoder.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
    models.denoiser.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("denoiser.")})
    if models.checksum() != manifest.get("checksum"):
        raise ValueError("checkpoint tensors do not match the recorded checksum")
    return models, manifest


@dataclass
class ResidualRun:
    entry: RegistryEntry
    history: object
    sub_loss_before: float
    sub_loss_after: float
    drift_subject: float
    drift_other: float


def learn_residual(models: Models, spec: ShapeSpec, name: str, cfg: RunConfig | None = None) -> ResidualRun:
    """Train a custom encoder for one subject and pull out its residual."""
    cfg = cfg or models.config
    rc = cfg.residual
    size = cfg.model.image_size
    dataset = make_subject_dataset(spec, cfg.data.subject_images, seed=rc.seed, canvas=(size, size), name=name)
    bank = load_template_bank()
    corpus = generate_corpus(spec.base_category, rc.corpus_size, bank, rc.seed, models.vocab,
                             context_length=cfg.model.context_length)
    held_out = generate_corpus(spec.base_category, 100, bank, rc.seed + 1, models.vocab,
                               context_length=cfg.model.context_length)
    before = evaluate_subject_loss(models.denoiser, models.encoder, models.schedule, dataset, models.vocab)
    custom, history = train_custom_encoder(
        models.encoder, models.denoiser, models.schedule, dataset, corpus, rc, models.vocab
    )
    after = evaluate_subject_loss(models.denoiser, custom, models.schedule, dataset, models.vocab)
    fingerprint = {
        "config": cfg.digest(),
        "train": rc.digest(),
        "seed": rc.seed,
        "ckpt": models.checksum()[:16],
    }
    res = extract_residual(models.encoder, custom, corpus, spec.base_category, name, fingerprint)
    drift_s, drift_o = embedding_drift(models.encoder, custom, held_out)
    entry = RegistryEntry(name, spec.base_category, res.delta.numpy(), fingerprint)
    return ResidualRun(entry, history, before, after, drift_s, drift_o)


def to_uint8(images) -> np.ndarray:
    """(N, 3, H, W) in [-1, 1] -> (N, H, W, 3) uint8."""
    x = np.asarray(images, dtype=np.float64)
    return np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def from_uint8(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)
    return x / 127.5 - 1.0
