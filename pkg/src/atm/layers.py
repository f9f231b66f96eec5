"""Transformer building blocks, augmentation and optimisation helpers shared by both models."""
from __future__ import annotations

import math

import torch
import torch.nn as nn


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        # mask: (N, N) bool, True where attention is allowed
        B, N, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, N, 3, h, D // h).permute(2, 0, 3, 1, 4)
        out = nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = max(1, int(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


def fourier_features(xy: torch.Tensor, num_freqs: int = 4) -> torch.Tensor:
    """Sin/cos features of 2D coordinates; (..., 2) -> (..., 4 * num_freqs)."""
    freqs = (2.0 ** torch.arange(num_freqs, dtype=xy.dtype, device=xy.device)) * math.pi
    ang = xy[..., None] * freqs  # (..., 2, F)
    return torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)


# images --------------------------------------------------------------------


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, (H/ps)*(W/ps), ps*ps*C), patches in row-major order."""
    B, H, W, C = images.shape
    ps = patch_size
    if H % ps or W % ps:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {ps}")
    x = images.reshape(B, H // ps, ps, W // ps, ps, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // ps) * (W // ps), ps * ps * C)


def unpatchify(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    B, P, _ = patches.shape
    ps = patch_size
    C = patches.shape[-1] // (ps * ps)
    x = patches.reshape(B, height // ps, width // ps, ps, ps, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, height, width, C)


def to_float_images(frames) -> torch.Tensor:
    t = torch.as_tensor(frames)
    if t.dtype == torch.uint8:
        return t.float() / 255.0
    return t.float() if t.dtype not in (torch.float32, torch.float64) else t


def random_shift(images: torch.Tensor, pad: int, generator=None, shifts=None):
    """Translate each image by an integer pixel offset with edge replication.

    images: (B, H, W, C).  Returns (shifted images, shifts (B, 2) as (dx, dy)).
    Content at pixel (x, y) moves to (x + dx, y + dy).
    """
    B, H, W, C = images.shape
    if shifts is None:
        shifts = torch.randint(-pad, pad + 1, (B, 2), generator=generator)
    ys = torch.arange(H)
    xs = torch.arange(W)
    out = torch.empty_like(images)
    for b in range(B):
        dx, dy = int(shifts[b, 0]), int(shifts[b, 1])
        src_y = (ys - dy).clamp(0, H - 1)
        src_x = (xs - dx).clamp(0, W - 1)
        out[b] = images[b][src_y][:, src_x]
    return out, shifts


def color_jitter(images: torch.Tensor, brightness: float, contrast: float, saturation: float, generator=None):
    """Per-image random brightness, contrast and saturation; images in [0, 1], (B, H, W, 3)."""
    B = images.shape[0]

    def factor(amount):
        return 1.0 + (torch.rand(B, 1, 1, 1, generator=generator, dtype=images.dtype) * 2 - 1) * amount

    x = images * factor(brightness)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * factor(contrast) + mean
    gray = (x * torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype)).sum(-1, keepdim=True)
    x = (x - gray) * factor(saturation) + gray
    return x.clamp(0.0, 1.0)


# optimisation --------------------------------------------------------------


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or name.endswith("_token") or "embed" in name else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=lr)


def cosine_with_warmup(optimizer, warmup_steps: int, total_steps: int, min_ratio: float = 0.0):
    def f(step):
        if warmup_steps > 0 and step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        progress = min(max(progress, 0.0), 1.0)
        return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, f)


class TrainingDivergedError(RuntimeError):
    pass


def check_finite(loss: torch.Tensor, where: str, **diag) -> None:
    if not torch.isfinite(loss):
        details = ", ".join(f"{k}={v}" for k, v in diag.items())
        raise TrainingDivergedError(f"non-finite loss in {where} ({details})")


def masked_mse(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over all elements, or over elements where `valid` broadcasts True."""
    se = (pred - target) ** 2
    if valid is None:
        return se.mean()
    w = valid.to(se.dtype).expand_as(se)
    return (se * w).sum() / w.sum().clamp_min(1.0)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g

