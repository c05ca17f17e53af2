"""Instance encoder: feature extractor, global average pooling and subspace projector."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 32
    n_downsamples: int = 3
    leaky_slope: float = 0.1
    embed_dim: int = 128
    momentum: float = 0.999
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.base_channels * 2 ** self.n_downsamples


class FeatureExtractor(nn.Module):
    """Stem conv, then per stage two 3x3 convs and a stride-2 conv that doubles the width."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        act = lambda: nn.LeakyReLU(cfg.leaky_slope)  # noqa: E731
        c = cfg.base_channels
        layers = [nn.Conv2d(cfg.in_channels, c, 3, padding=1), act()]
        for _ in range(cfg.n_downsamples):
            layers += [
                nn.Conv2d(c, c, 3, padding=1), act(),
                nn.Conv2d(c, c, 3, padding=1), act(),
                nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), act(),
            ]
            c *= 2
        self.body = nn.Sequential(*layers)

    @property
    def factor(self) -> int:
        return 2 ** self.cfg.n_downsamples

    @property
    def final_conv(self) -> nn.Conv2d:
        return self.body[-2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ValueError(f"input {H}x{W} not divisible by {self.factor}; pad before encoding")
        return self.body(x)


class Projector(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int, slope: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.LeakyReLU(slope), nn.Linear(in_dim, embed_dim))

    def forward(self, v):
        return self.net(v)


def gap(feats: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the spatial axes: ``(B, C, h, w) -> (B, C)``."""
    return feats.mean(dim=(-2, -1))


def unit_normalize(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("projector produced a zero vector; embedding is undefined")
    return v / norm


class InstanceEncoder(nn.Module):
    """Maps a rainy image to a unit-norm embedding ``z``."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.projector = Projector(cfg.out_channels, cfg.embed_dim, cfg.leaky_slope)

    def features(self, x):
        return self.extractor(x)

    def embed_features(self, feats):
        return unit_normalize(self.projector(gap(feats)))

    def forward(self, x):
        return self.embed_features(self.features(x))

    embed = forward


def make_momentum_twin(extractor: FeatureExtractor) -> FeatureExtractor:
    twin = copy.deepcopy(extractor)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


@torch.no_grad()
def momentum_update(online: nn.Module, twin: nn.Module, m: float) -> nn.Module:
    """In place: ``twin <- m * twin + (1 - m) * online`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    po = dict(online.named_parameters())
    pt = dict(twin.named_parameters())
    if po.keys() != pt.keys():
        raise ValueError("online and momentum parameter sets differ")
    for name, t in pt.items():
        o = po[name]
        if o.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(o.shape)} vs {tuple(t.shape)}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.copy_(o)
        else:
            t.mul_(m).add_(o.detach(), alpha=1.0 - m)
    return twin


def augment(x: torch.Tensor, seed: int, crop: bool = True, flip: bool = True,
            min_scale: float = 0.7) -> torch.Tensor:
    """Random crop resized back to the input size plus a random horizontal flip.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; each sample of a batch gets
    its own draw from one generator seeded by ``seed``.
    """
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    rng = np.random.default_rng(seed)
    H, W = xb.shape[-2:]
    out = []
    for img in xb:
        if crop:
            s = rng.uniform(min_scale, 1.0)
            h, w = max(2, int(round(H * s))), max(2, int(round(W * s)))
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            patch = img[:, top:top + h, left:left + w]
            if (h, w) != (H, W):
                patch = F.interpolate(patch[None], size=(H, W), mode="bilinear", align_corners=False)[0]
            img = patch
        if flip and rng.uniform() < 0.5:
            img = img.flip(-1)
        out.append(img)
    res = torch.stack(out)
    return res[0] if single else res
