"""Image containers, quality metrics and Gaussian blur.

Images are float arrays of shape ``(H, W, C)`` with values in ``[0, 1]``.
Models consume ``(B, C, H, W)`` tensors; :func:`to_tensor` and
:func:`from_tensor` convert between the two layouts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImagePair:
    """A rainy image ``x``, its clean ground truth ``y`` and the dataset it came from."""

    x: np.ndarray
    y: np.ndarray
    dataset_id: str = ""

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"pair shape mismatch: {self.x.shape} vs {self.y.shape}")

    @property
    def residual(self) -> np.ndarray:
        return self.x - self.y


def as_image(data, min_size: int = 1) -> np.ndarray:
    """Validate and normalise ``data`` into an ``(H, W, C)`` float64 image."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxWxC image with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"image {arr.shape[:2]} smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def to_tensor(imgs, dtype=torch.float32) -> torch.Tensor:
    """Stack one or more ``(H, W, C)`` images into a ``(B, C, H, W)`` tensor."""
    if isinstance(imgs, np.ndarray) and imgs.ndim == 3:
        imgs = [imgs]
    arr = np.stack([as_image(im) for im in imgs]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def from_tensor(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return [a.copy() for a in arr]


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as an RGB ``[0, 1]`` image."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit RGB PNG (round-to-nearest quantisation)."""
    img = as_image(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    q = np.round(clamp01(img) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(q, mode="RGB").save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    """Apply the same 8-bit quantisation as a save/load round trip."""
    return np.round(clamp01(img) * 255.0) / 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1.0, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def to_luma(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ _LUMA


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalised 1D Gaussian taps; radius defaults to ``ceil(3 * sigma)``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = blur_radius(sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def _correlate_axis(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    # arr is already padded along `axis` by len(taps) // 2 on both sides
    n = arr.shape[axis] - len(taps) + 1
    out = np.zeros(arr.shape[:axis] + (n,) + arr.shape[axis + 1:])
    for i, w in enumerate(taps):
        out += w * np.take(arr, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(y: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; output has the input shape."""
    y = as_image(y)
    taps = gaussian_kernel1d(sigma)
    r = len(taps) // 2
    if r >= min(y.shape[:2]):
        raise ValueError(f"blur radius {r} too large for image {y.shape[:2]}")
    padded = np.pad(y, ((r, r), (0, 0), (0, 0)), mode="reflect")
    tmp = _correlate_axis(padded, taps, 0)
    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return _correlate_axis(padded, taps, 1)


def _window_mean(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # valid-mode separable filtering of a 2D array
    return _correlate_axis(_correlate_axis(img, taps, 0), taps, 1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    la, lb = to_luma(a), to_luma(b)
    if min(la.shape) < SSIM_WINDOW:
        raise ValueError(f"image {la.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    taps = gaussian_kernel1d(SSIM_SIGMA, radius=SSIM_WINDOW // 2)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _window_mean(la, taps)
    mu_b = _window_mean(lb, taps)
    var_a = _window_mean(la * la, taps) - mu_a ** 2
    var_b = _window_mean(lb * lb, taps) - mu_b ** 2
    cov = _window_mean(la * lb, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
