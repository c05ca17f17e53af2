"""Toy derainers built from modulated layers, plus an identity baseline."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .coim import ModulatedAttention, ModulatedConv2d


class ToyUNet(nn.Module):
    """Two-level U-Net predicting the rain layer; output is ``x - rain``.

    Every convolution is a :class:`ModulatedConv2d`.
    """

    factor = 4

    def __init__(self, width=16, embed_dim=128, modulated=True, in_channels=3, slope=0.1):
        super().__init__()
        w = width
        self.modulated = modulated
        conv = lambda i, o, s=1: ModulatedConv2d(i, o, 3, stride=s, embed_dim=embed_dim,  # noqa: E731
                                                 modulated=modulated)
        self.enc1a = conv(in_channels, w)
        self.enc1b = conv(w, w)
        self.down1 = conv(w, 2 * w, 2)
        self.enc2 = conv(2 * w, 2 * w)
        self.down2 = conv(2 * w, 4 * w, 2)
        self.bott1 = conv(4 * w, 4 * w)
        self.bott2 = conv(4 * w, 4 * w)
        self.up2 = conv(4 * w, 2 * w)
        self.dec2 = conv(4 * w, 2 * w)
        self.up1 = conv(2 * w, w)
        self.dec1 = conv(2 * w, w)
        self.head = conv(w, in_channels)
        self.act = nn.LeakyReLU(slope)

    def conv_layers(self) -> list[tuple[str, ModulatedConv2d]]:
        return [(n, m) for n, m in self.named_children() if isinstance(m, ModulatedConv2d)]

    def forward(self, x, z=None):
        a = self.act
        e1 = a(self.enc1b(a(self.enc1a(x, z)), z))
        e2 = a(self.enc2(a(self.down1(e1, z)), z))
        b = a(self.down2(e2, z))
        b = a(self.bott2(a(self.bott1(b, z)), z))
        d2 = a(self.up2(F.interpolate(b, scale_factor=2, mode="nearest"), z))
        d2 = a(self.dec2(torch.cat([d2, e2], 1), z))
        d1 = a(self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"), z))
        d1 = a(self.dec1(torch.cat([d1, e1], 1), z))
        return x - self.head(d1, z)


class FormerBlock(nn.Module):
    def __init__(self, dim, embed_dim=128, modulated=True, num_heads=1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ModulatedAttention(dim, embed_dim, num_heads, modulated)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, t, z=None):
        t = t + self.attn(self.norm1(t), z)
        return t + self.ffn(self.norm2(t))


class ToyFormer(nn.Module):
    """8x8 patch tokens, two modulated attention blocks, linear unpatch head."""

    factor = 8

    def __init__(self, dim=64, depth=2, embed_dim=128, modulated=True, in_channels=3, patch=8):
        super().__init__()
        self.patch, self.in_channels = patch, in_channels
        self.modulated = modulated
        self.embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.blocks = nn.ModuleList([FormerBlock(dim, embed_dim, modulated) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.unpatch = nn.Linear(dim, in_channels * patch * patch)

    def tokens(self, x):
        return self.embed(x).flatten(2).transpose(1, 2)

    def forward(self, x, z=None):
        B, C, H, W = x.shape
        p = self.patch
        t = self.tokens(x)
        for blk in self.blocks:
            t = blk(t, z)
        rain = self.unpatch(self.norm(t)).transpose(1, 2)
        rain = F.fold(rain, (H, W), kernel_size=p, stride=p)
        return x - rain


class IdentityModel(nn.Module):
    factor = 1
    modulated = False

    def forward(self, x, z=None):
        return x


def check_dims(model, x):
    H, W = x.shape[-2:]
    f = getattr(model, "factor", 1)
    if H % f or W % f:
        raise ValueError(f"input {H}x{W} not divisible by model factor {f}")


def forward(model, x, z=None):
    """Restore ``x`` (``(B, C, H, W)``), clamped to ``[0, 1]``; ``z=None`` skips modulation."""
    check_dims(model, x)
    return model(x, z).clamp(0.0, 1.0)


def _is_modulation(name: str) -> bool:
    return "ctx_mlp" in name.split(".")


def count_params(model, part: str = "all") -> int:
    """Exact parameter count; ``part`` is ``all``, ``base`` or ``modulation``."""
    total = 0
    for name, p in model.named_parameters():
        mod = _is_modulation(name)
        if part == "all" or (part == "modulation" and mod) or (part == "base" and not mod):
            total += p.numel()
    return total


def base_state_dict(model) -> dict:
    return {k: v for k, v in model.state_dict().items() if not _is_modulation(k)}


def build_model(kind="unet", width=16, embed_dim=128, modulated=True):
    if kind == "unet":
        return ToyUNet(width=width, embed_dim=embed_dim, modulated=modulated)
    if kind == "former":
        return ToyFormer(dim=4 * width, embed_dim=embed_dim, modulated=modulated)
    if kind == "identity":
        return IdentityModel()
    raise ValueError(f"unknown model kind {kind!r}")
