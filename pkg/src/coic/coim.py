"""Context-based instance-level modulation of convolution and attention layers.

A modulated convolution rescales its base kernel ``W`` per sample by an
adaptive weight ``A`` of the same shape::

    tau[c, c'] = 1 / sigmoid(Q[c] + R[c'])
    A[c, c', :, :] = k^2 * softmax(Z / tau[c, c'])        # softmax over the k x k taps
    out = (A * W) conv F_in + b

``Q``, ``R`` and ``Z`` come from a small MLP on ``[z, GAP(F_in)]``.  When
``Z`` is constant, ``A`` is identically one and the layer reduces to the
plain convolution.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import gap


@dataclass
class ModulationContext:
    """Batched modulation quantities for one layer (leading axis = sample)."""

    Q: torch.Tensor    # (B, C)
    R: torch.Tensor    # (B, C'/groups)
    Z: torch.Tensor    # (B, k, k)
    tau: torch.Tensor  # (B, C, C'/groups)
    A: torch.Tensor    # (B, C, C'/groups, k, k)


def channel_temperature(Q: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    return 1.0 / torch.sigmoid(Q[:, :, None] + R[:, None, :])


def adaptive_weight(Z: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """``k^2 * softmax(Z / tau)`` over the kernel taps, for every channel pair."""
    B, k, _ = Z.shape
    logits = Z.reshape(B, 1, 1, k * k) / tau[..., None]
    A = (k * k) * torch.softmax(logits, dim=-1)
    return A.reshape(*tau.shape, k, k)


def build_context(Q, R, Z) -> ModulationContext:
    tau = channel_temperature(Q, R)
    return ModulationContext(Q=Q, R=R, Z=Z, tau=tau, A=adaptive_weight(Z, tau))


def grouped_modulated_conv(x, weight, bias, A, stride=1, padding=0, groups=1):
    """Per-sample modulated convolution as one grouped convolution.

    The batch is folded into the channel axis so sample ``b`` only sees
    its own kernel ``A[b] * weight``.
    """
    B, C_in, H, W = x.shape
    C_out = weight.shape[0]
    if A.shape[0] != B or A.shape[1:] != weight.shape:
        raise ValueError(f"adaptive weight {tuple(A.shape)} incompatible with batch {B} and kernel "
                         f"{tuple(weight.shape)}")
    w = (weight.unsqueeze(0) * A).reshape(B * C_out, *weight.shape[1:])
    b = bias.repeat(B) if bias is not None else None
    out = F.conv2d(x.reshape(1, B * C_in, H, W), w, b, stride=stride, padding=padding, groups=B * groups)
    return out.reshape(B, C_out, *out.shape[-2:])


class ModulatedConv2d(nn.Module):
    """Conv layer whose kernel is modulated per sample by ``(z, GAP(input))``.

    With ``modulated=False`` it is a plain ``nn.Conv2d`` under the same
    parameter names (``conv.weight``, ``conv.bias``), so base weights are
    interchangeable between the two variants.
    """

    def __init__(self, in_c, out_c, k, stride=1, padding=None, groups=1, bias=True,
                 embed_dim=128, modulated=True, hidden=None, slope=0.1):
        super().__init__()
        if padding is None:
            padding = k // 2
        self.conv = nn.Conv2d(in_c, out_c, k, stride, padding, groups=groups, bias=bias)
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride, self.padding, self.groups = stride, padding, groups
        self.embed_dim = embed_dim
        self.modulated = modulated
        self.kernel_in = in_c // groups
        self.ctx_out = out_c + self.kernel_in + k * k
        self.last_context: ModulationContext | None = None
        self.record_context = False
        if modulated:
            if hidden is None:
                hidden = max(64, (out_c + in_c) // 2)
            self.ctx_mlp = nn.Sequential(
                nn.Linear(embed_dim + in_c, hidden),
                nn.LeakyReLU(slope),
                nn.Linear(hidden, self.ctx_out),
            )
            # start from the unmodulated layer: Q = R = 0 and Z = 0
            nn.init.zeros_(self.ctx_mlp[2].weight)
            nn.init.zeros_(self.ctx_mlp[2].bias)

    @staticmethod
    def mlp_param_count(in_c, out_c, k, groups=1, embed_dim=128, hidden=None) -> int:
        if hidden is None:
            hidden = max(64, (out_c + in_c) // 2)
        out = out_c + in_c // groups + k * k
        return (embed_dim + in_c) * hidden + hidden + hidden * out + out

    def gen_context(self, z: torch.Tensor, pooled: torch.Tensor) -> ModulationContext:
        if not self.modulated:
            raise RuntimeError("unmodulated layer has no context MLP")
        if z.shape[-1] != self.embed_dim or pooled.shape[-1] != self.in_c:
            raise ValueError(f"context inputs {tuple(z.shape)}, {tuple(pooled.shape)} do not match "
                             f"embed_dim={self.embed_dim}, in_c={self.in_c}")
        out = self.ctx_mlp(torch.cat([z, pooled], dim=-1))
        C, Cp, k = self.out_c, self.kernel_in, self.k
        Q, R, Z = out[:, :C], out[:, C:C + Cp], out[:, C + Cp:].reshape(-1, k, k)
        return build_context(Q, R, Z)

    def forward(self, x, z=None, ctx: ModulationContext | None = None):
        if ctx is None and z is not None and self.modulated:
            ctx = self.gen_context(z, gap(x))
        if self.record_context:
            self.last_context = ctx
        if ctx is None:
            return self.conv(x)
        return grouped_modulated_conv(x, self.conv.weight, self.conv.bias, ctx.A,
                                      self.stride, self.padding, self.groups)


def modulated_conv(F_in, layer: ModulatedConv2d, ctx: ModulationContext | None):
    return layer(F_in, ctx=ctx)


# ---------------------------------------------------------------------------
# attention


class ModulatedAttention(nn.Module):
    """Cross-attention whose keys and values see ``X + c`` with ``c = Linear(SiLU(z))``.

    The context projection is zero-initialised, so at construction the
    layer is ordinary self-attention.
    """

    def __init__(self, dim, embed_dim=128, num_heads=1, modulated=True):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim, self.num_heads = dim, num_heads
        self.d_k = dim // num_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.modulated = modulated
        if modulated:
            self.ctx_mlp = nn.Sequential(nn.SiLU(), nn.Linear(embed_dim, dim))
            nn.init.zeros_(self.ctx_mlp[1].weight)
            nn.init.zeros_(self.ctx_mlp[1].bias)

    def context(self, z):
        return self.ctx_mlp(z)

    def _heads(self, t):
        B, N, _ = t.shape
        return t.reshape(B, N, self.num_heads, self.d_k).transpose(1, 2)

    def forward(self, X, z=None):
        B, N, D = X.shape
        if D != self.dim:
            raise ValueError(f"token dim {D} != {self.dim}")
        Xc = X
        if z is not None and self.modulated:
            Xc = X + self.context(z)[:, None, :]
        q = self._heads(self.w_q(X))
        k = self._heads(self.w_k(Xc))
        v = self._heads(self.w_v(Xc))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(y)


def modulated_attention(X, z, layer: ModulatedAttention):
    return layer(X, z)


# ---------------------------------------------------------------------------
# induced temperature


@dataclass
class TemperatureProfile:
    """``T[b, c, c']`` per sample; rows of constant ``Z`` are flagged and set to ``inf``."""

    T: torch.Tensor          # (B, C, C')
    infinite: torch.Tensor   # (B,) bool

    @property
    def log_T(self) -> torch.Tensor:
        return torch.log(self.T)


def _spread(Z: torch.Tensor) -> torch.Tensor:
    flat = Z.reshape(Z.shape[0], -1)
    return flat - flat.min(dim=1, keepdim=True).values


def temperature_profile(ctx: ModulationContext, k: int | None = None, atol: float = 0.0) -> TemperatureProfile:
    """``T = k^2 * tau / mean(Z - min Z)``; infinite where ``Z`` is constant."""
    if k is None:
        k = ctx.Z.shape[-1]
    zbar = _spread(ctx.Z)
    mu = zbar.mean(dim=1)
    infinite = zbar.max(dim=1).values <= atol
    safe_mu = torch.where(infinite, torch.ones_like(mu), mu)
    T = (k * k) * ctx.tau / safe_mu[:, None, None]
    T = torch.where(infinite[:, None, None], torch.full_like(T, math.inf), T)
    return TemperatureProfile(T=T, infinite=infinite)


def softmax_t(s: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Standard softmax over the last axis with temperature ``t`` (broadcast)."""
    return torch.softmax(s / t, dim=-1)


def temperature_softmax(Z: torch.Tensor, tau: torch.Tensor, k: int | None = None):
    """Both parameterisations of the tap distribution, for cross-checking.

    Returns ``(direct, reparam)`` where ``direct = softmax(Z / tau)`` and
    ``reparam = softmax(k^2 * Gamma, T)`` with ``Gamma = (Z - min Z) / mean(Z - min Z)``
    and ``T = k^2 * tau / mean(Z - min Z)``.  Shapes ``(B, C, C', k*k)``.
    """
    B = Z.shape[0]
    if k is None:
        k = Z.shape[-1]
    flat = Z.reshape(B, 1, 1, -1)
    direct = softmax_t(flat, tau[..., None])
    zbar = _spread(Z)
    mu = zbar.mean(dim=1)
    gamma = (zbar / mu[:, None]).reshape(B, 1, 1, -1)
    T = (k * k) * tau / mu[:, None, None]
    reparam = softmax_t((k * k) * gamma, T[..., None])
    return direct, reparam


def write_profile_csv(path, rows) -> None:
    """``rows`` of ``(layer_index, c, c_prime, log_T)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_index", "c", "c_prime", "log_T"])
        for r in rows:
            w.writerow(r)
