"""Rain-/detail-aware negatives and the contrastive embedding loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imagecore import ImagePair, blur_radius, clamp01, gaussian_blur, gaussian_kernel1d
from .rainsim import batch_dissimilar_index, retrieve_most_dissimilar_rain

N_B = 4
SIGMA_RANGE = (0.3, 1.5)


@dataclass
class NegativeSet:
    rain_negative: np.ndarray
    detail_negatives: list
    sigmas: list


def sample_sigmas(rng: np.random.Generator, n: int = N_B, sigma_range=SIGMA_RANGE) -> np.ndarray:
    lo, hi = sigma_range
    if not 0 < lo < hi:
        raise ValueError(f"invalid sigma range {sigma_range}")
    return rng.uniform(lo, hi, size=n)


def build_negatives(pair: ImagePair, rain_bank, rng_seed: int, n_b: int = N_B,
                    sigma_range=SIGMA_RANGE, sigmas=None) -> NegativeSet:
    """One rain-aware negative plus ``n_b`` blurred copies of the clean image."""
    r_tilde = retrieve_most_dissimilar_rain(rain_bank, pair.residual)
    if sigmas is None:
        sigmas = sample_sigmas(np.random.default_rng(rng_seed), n_b, sigma_range)
    sigmas = [float(s) for s in sigmas]
    return NegativeSet(
        rain_negative=clamp01(pair.y + r_tilde),
        detail_negatives=[gaussian_blur(pair.y, s) for s in sigmas],
        sigmas=sigmas,
    )


def blur_batch(y: torch.Tensor, sigmas) -> torch.Tensor:
    """Blur each image of ``y`` (``(B, C, H, W)``) once per sigma.

    Returns ``(B, len(sigmas_per_sample), C, H, W)``; ``sigmas`` is a
    ``(B, n)`` array.  Matches :func:`coic.imagecore.gaussian_blur`.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    B, C, H, W = y.shape
    out = torch.empty((B, sigmas.shape[1], C, H, W), dtype=y.dtype)
    r = blur_radius(float(sigmas.max()))
    padded = F.pad(y, (r, r, r, r), mode="reflect")
    for b in range(B):
        for j, s in enumerate(sigmas[b]):
            # taps padded with zeros up to the shared radius
            taps = np.zeros(2 * r + 1)
            k = gaussian_kernel1d(float(s))
            rr = len(k) // 2
            taps[r - rr:r + rr + 1] = k
            t = torch.as_tensor(taps, dtype=y.dtype)
            img = padded[b:b + 1].transpose(0, 1)  # (C, 1, H+2r, W+2r)
            img = F.conv2d(img, t.view(1, 1, -1, 1))
            img = F.conv2d(img, t.view(1, 1, 1, -1))
            out[b, j] = img[:, 0]
    return out


def batch_rain_negatives(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Rain-aware negatives for a batch, using the batch's own residuals as the bank."""
    residual = x - y
    idx = batch_dissimilar_index(residual, residual)
    return (y + residual[idx]).clamp(0.0, 1.0)


def _pooled_cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    pa, pb = a.mean(dim=(-2, -1)), b.mean(dim=(-2, -1))
    na, nb = pa.norm(dim=-1), pb.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("zero-norm pooled feature vector in contrastive loss")
    return (pa * pb).sum(-1) / (na * nb)


def _spatial_cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-3, eps=1e-12).mean(dim=(-2, -1))


def similarities(anchor, key, rain_neg, detail_negs, mode: str = "pooled") -> torch.Tensor:
    """Cosine similarities ``(B, 2 + n_b)``: positive first, then rain, then detail negatives.

    ``anchor``, ``key``, ``rain_neg`` are ``(B, C, h, w)``; ``detail_negs`` is ``(B, n_b, C, h, w)``.
    """
    cos = {"pooled": _pooled_cos, "spatial": _spatial_cos}[mode]
    shapes = {anchor.shape, key.shape, rain_neg.shape, detail_negs.shape[:1] + detail_negs.shape[2:]}
    if len(shapes) != 1:
        raise ValueError(f"feature maps differ in shape: {shapes}")
    s_pos = cos(anchor, key)
    s_rain = cos(anchor, rain_neg)
    s_det = cos(anchor.unsqueeze(1), detail_negs)
    return torch.cat([s_pos[:, None], s_rain[:, None], s_det], dim=1)


def loss_from_similarities(sims: torch.Tensor) -> torch.Tensor:
    """Per-sample ``-log(e^{s_pos} / sum_j e^{s_j})`` with the positive in column 0."""
    return torch.logsumexp(sims, dim=1) - sims[:, 0]


def contrastive_loss(anchor, key, rain_neg, detail_negs, mode: str = "pooled",
                     reduction: str = "mean") -> torch.Tensor:
    per_sample = loss_from_similarities(similarities(anchor, key, rain_neg, detail_negs, mode))
    if reduction == "none":
        return per_sample
    return per_sample.mean() if reduction == "mean" else per_sample.sum()
