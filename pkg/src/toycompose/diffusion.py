"""Forward process, cross-attention U-Net denoiser, DDIM sampler and base pretraining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import EmbeddingSequence, TextEncoder
from .text import TokenizedPrompt

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss or activation went non-finite."""


class EditorContractError(ValueError):
    """An attention editor returned logits of the wrong shape."""


# --------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray  # signal scale per t = 0..T
    sigmas: np.ndarray  # noise scale per t = 0..T
    kind: str = "cosine"

    def alpha(self, t) -> Tensor:
        return torch.as_tensor(self.alphas[np.asarray(t)])

    def sigma(self, t) -> Tensor:
        return torch.as_tensor(self.sigmas[np.asarray(t)])


# Keeps the signal coefficient at t=T away from zero so x0 can be recovered.
_MIN_ALPHA_BAR = 1e-5


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    """Variance-preserving schedule with alpha_t**2 + sigma_t**2 == 1."""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        s = 0.008
        f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
    elif kind == "linear":
        betas = np.linspace(1e-4 * 1000 / T, 0.02 * 1000 / T, T).clip(max=0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    alpha_bar = np.clip(alpha_bar, _MIN_ALPHA_BAR, 1.0)
    alpha_bar = np.minimum.accumulate(alpha_bar)
    alphas = np.sqrt(alpha_bar)
    sigmas = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, alphas=alphas, sigmas=sigmas, kind=kind)


def forward_diffuse(x: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """x_t = alpha_t * x + sigma_t * eps; ``t`` is an int or a per-sample index tensor."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    t_np = np.asarray(t.cpu() if isinstance(t, Tensor) else t)
    if np.any(t_np < 0) or np.any(t_np > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    a = torch.as_tensor(schedule.alphas[t_np], dtype=x.dtype, device=x.device)
    s = torch.as_tensor(schedule.sigmas[t_np], dtype=x.dtype, device=x.device)
    if a.ndim == 1:
        a = a.view(-1, *([1] * (x.ndim - 1)))
        s = s.view(-1, *([1] * (x.ndim - 1)))
    return a * x + s * eps


# --------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    image_channels: int = 3
    image_size: int = 16
    channels: int = 64
    d_text: int = 64
    heads: int = 2
    T: int = 1000


@dataclass
class AttentionContext:
    layer_id: int
    resolution: tuple[int, int]
    timestep: int
    step_index: Optional[int] = None


@dataclass
class CrossAttentionRecord:
    layer_id: int
    resolution: tuple[int, int]
    logits: Tensor  # (B, heads, h*w, L)
    weights: Tensor  # softmax over the last axis
    timestep: int


# editor(logits, context) -> replacement logits of identical shape
AttentionEditor = Callable[[Tensor, AttentionContext], Tensor]


def _groups(c: int) -> int:
    return math.gcd(8, c)


def timestep_embedding(t: Tensor, dim: int, T: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.double() * (1000.0 / T))[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Image-to-text attention; pre-softmax logits are exposed to an editor."""

    def __init__(self, channels: int, d_text: int, heads: int, layer_id: int):
        super().__init__()
        assert channels % heads == 0
        self.layer_id = layer_id
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_text, channels, bias=False)
        self.to_v = nn.Linear(d_text, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx, ctx_valid, timestep, editor=None, records=None, step_index=None):
        B, C, h, w = x.shape
        H, dh = self.heads, C // self.heads
        L = ctx.shape[1]
        feats = self.norm(x).flatten(2).transpose(1, 2)  # (B, hw, C)
        q = self.to_q(feats).view(B, h * w, H, dh).transpose(1, 2)
        k = self.to_k(ctx).view(B, L, H, dh).transpose(1, 2)
        v = self.to_v(ctx).view(B, L, H, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        logits = logits.masked_fill(~ctx_valid[:, None, None, :], float("-inf"))
        if editor is not None:
            info = AttentionContext(self.layer_id, (h, w), timestep, step_index)
            edited = editor(logits, info)
            if not isinstance(edited, Tensor) or edited.shape != logits.shape:
                got = getattr(edited, "shape", type(edited))
                raise EditorContractError(
                    f"editor returned {got} for layer {self.layer_id}, expected {tuple(logits.shape)}"
                )
            logits = edited
        weights = torch.softmax(logits, dim=-1)
        if records is not None:
            records.append(
                CrossAttentionRecord(self.layer_id, (h, w), logits.detach(), weights.detach(), timestep)
            )
        out = (weights @ v).transpose(1, 2).reshape(B, h * w, C)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, h, w)
        return x + out


class Denoiser(nn.Module):
    """Two-resolution U-Net predicting the added noise.

    Cross-attention layer 0 runs at full resolution (decoder side), layer 1
    at half resolution (bottleneck).
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c, d = config.channels, config.d_text
        t_dim = 4 * c
        self.t_dim = c
        self.time_mlp = nn.Sequential(nn.Linear(c, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(config.image_channels, c, 3, padding=1)
        self.down_res = ResBlock(c, c, t_dim)
        self.downsample = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(c, c, t_dim)
        self.mid_attn = CrossAttention(c, d, config.heads, layer_id=1)
        self.mid_res2 = ResBlock(c, c, t_dim)
        self.upsample = nn.Conv2d(c, c, 3, padding=1)
        self.up_res = ResBlock(2 * c, c, t_dim)
        self.up_attn = CrossAttention(c, d, config.heads, layer_id=0)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, config.image_channels, 3, padding=1)

    def attention_layers(self) -> list[CrossAttention]:
        return [self.up_attn, self.mid_attn]

    def attention_resolutions(self) -> list[tuple[int, int]]:
        s = self.config.image_size
        return [(s, s), (s // 2, s // 2)]

    def forward(self, x, t, ctx, ctx_valid, editor=None, records=None, step_index=None):
        """x (B,C,H,W); t (B,) long; ctx (B,L,d_text); ctx_valid (B,L) bool."""
        temb = timestep_embedding(t, self.t_dim, self.config.T).to(x.dtype)
        temb = self.time_mlp(temb)
        t_int = int(t[0]) if t.numel() else 0
        kw = dict(editor=editor, records=records, step_index=step_index)
        h0 = self.down_res(self.conv_in(x), temb)
        h = self.mid_res1(self.downsample(h0), temb)
        h = self.mid_attn(h, ctx, ctx_valid, t_int, **kw)
        h = self.mid_res2(h, temb)
        h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up_res(torch.cat([h, h0], dim=1), temb)
        h = self.up_attn(h, ctx, ctx_valid, t_int, **kw)
        return self.conv_out(F.silu(self.norm_out(h)))


def _as_batch(emb, batch: int):
    """EmbeddingSequence or (ctx, valid) -> batched (ctx, valid)."""
    if isinstance(emb, EmbeddingSequence):
        L = emb.vectors.shape[0]
        valid = torch.arange(L, device=emb.vectors.device) < emb.length
        return emb.vectors.expand(batch, -1, -1), valid.expand(batch, -1)
    ctx, valid = emb
    if ctx.shape[0] != batch:
        ctx, valid = ctx.expand(batch, -1, -1), valid.expand(batch, -1)
    return ctx, valid


def predict_noise(
    params: Denoiser,
    x_t: Tensor,
    emb,
    t,
    editor: AttentionEditor | None = None,
    record: bool = False,
    step_index: int | None = None,
):
    """Noise prediction for a (batched) noisy image; returns (eps_hat, records)."""
    single = x_t.ndim == 3
    x = x_t[None] if single else x_t
    B = x.shape[0]
    if isinstance(emb, EmbeddingSequence) and emb.vectors.shape[-1] != params.config.d_text:
        raise ValueError("embedding width does not match the denoiser")
    ctx, valid = _as_batch(emb, B)
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B) if not isinstance(t, Tensor) or t.ndim == 0 else t
    records: list[CrossAttentionRecord] | None = [] if record else None
    out = params(x, tt, ctx.to(x.dtype), valid, editor=editor, records=records, step_index=step_index)
    return (out[0] if single else out), (records or [])


# --------------------------------------------------------------------------
# sampling


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending integer timesteps T = t_0 > ... > t_steps = 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in ts]


def initial_noise(seeds: Sequence[int], shape: tuple[int, ...], dtype=torch.float32) -> Tensor:
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s))
        out.append(torch.randn(shape, generator=g, dtype=torch.float64).to(dtype))
    return torch.stack(out)


@torch.no_grad()
def sample(
    params: Denoiser,
    schedule: NoiseSchedule,
    emb_cond,
    emb_uncond=None,
    steps: int = 50,
    guidance_scale: float | None = 7.5,
    seed: int | Sequence[int] = 0,
    editor: AttentionEditor | None = None,
    record: bool = False,
    clip_x0: bool = True,
):
    """Deterministic (eta = 0) DDIM sampling with classifier-free guidance.

    ``seed`` may be a list; each image's start noise comes from its own
    generator so results do not depend on batch composition.  The editor
    sees the conditional branch only.  Returns (images, records); records
    are only collected when ``record`` is set.
    """
    seeds = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    cfg = params.config
    dtype = next(params.parameters()).dtype
    x = initial_noise(seeds, (cfg.image_channels, cfg.image_size, cfg.image_size), dtype)
    use_cfg = guidance_scale is not None and emb_uncond is not None
    ts = ddim_timesteps(schedule.T, steps)
    records: list[CrossAttentionRecord] = []
    for i in range(steps):
        t, t_next = ts[i], ts[i + 1]
        eps, recs = predict_noise(params, x, emb_cond, t, editor=editor, record=record, step_index=i)
        records.extend(recs)
        if use_cfg:
            eps_u, _ = predict_noise(params, x, emb_uncond, t, step_index=i)
            eps = eps_u + guidance_scale * (eps - eps_u)
        a, s = float(schedule.alphas[t]), float(schedule.sigmas[t])
        x0 = (x - s * eps) / a
        if clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - a * x0) / s if s > 0 else eps
        a_n, s_n = float(schedule.alphas[t_next]), float(schedule.sigmas[t_next])
        x = a_n * x0 + s_n * eps
    return x.clamp(-1.0, 1.0), records


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    p_uncond: float = 0.1
    train_encoder: bool = True
    freeze_token_embedding: bool = False
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0


@dataclass
class PretrainResult:
    denoiser: Denoiser
    encoder: TextEncoder
    losses: list[float] = field(default_factory=list)


def diffusion_loss(denoiser, schedule, x0, ctx, valid, t, eps) -> Tensor:
    """Mean squared noise-prediction error (the base reconstruction objective)."""
    x_t = forward_diffuse(x0, t, eps, schedule)
    pred = denoiser(x_t, t, ctx, valid)
    return ((pred - eps) ** 2).mean()


def pretrain_base(
    images: Tensor,
    captions: Sequence[TokenizedPrompt],
    encoder: TextEncoder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    null_prompt: TokenizedPrompt,
    config: PretrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """Fit the denoiser (and optionally the encoder) on (image, caption) pairs.

    Captions are swapped for ``null_prompt`` with probability ``p_uncond``.
    """
    if len(images) != len(captions):
        raise ValueError("images and captions differ in length")
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    train_params = list(denoiser.parameters())
    if config.train_encoder:
        for name, p in encoder.named_parameters():
            if config.freeze_token_embedding and name.startswith("token_embedding"):
                p.requires_grad_(False)
            elif p.requires_grad:
                train_params.append(p)
    else:
        encoder.requires_grad_(False)
    opt = torch.optim.AdamW(train_params, lr=config.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / 200) * 0.5 * (1 + math.cos(math.pi * min(k, config.steps) / max(config.steps, 1)))
    )
    losses: list[float] = []
    n = len(images)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        drop = rng.random(config.batch_size) < config.p_uncond
        prompts = [null_prompt if d else captions[i] for i, d in zip(idx, drop)]
        x0 = images[idx]
        t = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        ctx = encoder.encode_batch(prompts)
        valid = torch.tensor([[j < p.length for j in range(len(p.ids))] for p in prompts])
        loss = diffusion_loss(denoiser, schedule, x0, ctx, valid, t, eps)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite pretraining loss at step {step}: {loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(train_params, config.grad_clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if progress is not None:
            progress(step, losses[-1])
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            log.info("pretrain step %d loss %.5f", step, losses[-1])
    encoder.requires_grad_(True)
    return PretrainResult(denoiser, encoder, losses)
