"""Procedural rain layers, paired-dataset generation and negative-bank retrieval.

Rain is additive: ``x = clamp(y + r, 0, 1)``.  Streaks are rasterised as
line segments with a tapered intensity profile along their length, which
stands in for motion blur while keeping the background exactly zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .imagecore import ImagePair, as_image, clamp01, load_image, quantize, save_image

REGIMES = ("light", "heavy", "accumulated")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class RainParams:
    angle: float = 0.0
    length: float = 12.0
    thickness: int = 1
    density: float = 20.0
    intensity: float = 0.6
    regime: str = "light"

    def __post_init__(self):
        if not -45.0 <= self.angle <= 45.0:
            raise ValueError(f"angle {self.angle} outside [-45, 45]")
        if not 4.0 <= self.length <= 32.0:
            raise ValueError(f"length {self.length} outside [4, 32]")
        if self.thickness not in (1, 2, 3):
            raise ValueError(f"thickness {self.thickness} outside [1, 3]")
        if self.density < 0:
            raise ValueError("density must be nonnegative")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside (0, 1]")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    def with_density(self, density: float) -> "RainParams":
        d = asdict(self)
        d["density"] = float(density)
        return RainParams(**d)


# engineering presets, not calibrated to any public benchmark
PRESETS = {
    "light": RainParams(angle=-10.0, length=10.0, thickness=1, density=25.0, intensity=0.55, regime="light"),
    "heavy": RainParams(angle=15.0, length=20.0, thickness=2, density=45.0, intensity=0.8, regime="heavy"),
    "accumulated": RainParams(angle=5.0, length=16.0, thickness=2, density=60.0, intensity=0.7,
                              regime="accumulated"),
}


@dataclass
class DatasetManifest:
    dataset_id: str
    regime: str
    rain_params: RainParams
    seed: int
    pairs: list = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "regime": self.regime,
            "seed": self.seed,
            "rain_params": asdict(self.rain_params),
            "pairs": list(self.pairs),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            dataset_id=d["dataset_id"],
            regime=d["regime"],
            rain_params=RainParams(**d["rain_params"]),
            seed=int(d["seed"]),
            pairs=list(d["pairs"]),
            root=path.parent,
        )

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def load_pairs(self) -> tuple[list[ImagePair], list[str]]:
        """Load all pairs; returns ``(pairs, missing_paths)``."""
        out, missing = [], []
        for entry in self.pairs:
            paths = [self.resolve(entry["rain"]), self.resolve(entry["clean"])]
            gone = [str(p) for p in paths if not p.exists()]
            if gone:
                missing.extend(gone)
                continue
            out.append(ImagePair(load_image(paths[0]), load_image(paths[1]), self.dataset_id))
        return out, missing


def find_manifests(root) -> list[DatasetManifest]:
    root = Path(root)
    if root.is_file():
        return [DatasetManifest.read(root)]
    return [DatasetManifest.read(p) for p in sorted(root.rglob(MANIFEST_NAME))]


# ---------------------------------------------------------------------------
# rain synthesis


def _draw_streaks(layer, params: RainParams, n_streaks: int, rng: np.random.Generator) -> None:
    H, W = layer.shape
    for _ in range(n_streaks):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        theta = math.radians(params.angle + rng.uniform(-5.0, 5.0))
        length = max(2.0, params.length * rng.uniform(0.75, 1.25))
        amp = params.intensity * rng.uniform(0.6, 1.0)
        # streak axis: near-vertical, tilted by theta
        dy, dx = math.cos(theta), math.sin(theta)
        n_steps = int(round(length))
        t = np.arange(n_steps) - (n_steps - 1) / 2.0
        profile = amp * (0.35 + 0.65 * np.sin(np.pi * (np.arange(n_steps) + 0.5) / n_steps))
        offsets = np.arange(params.thickness) - (params.thickness - 1) / 2.0
        for off in offsets:
            ys = np.round(cy + t * dy - off * dx).astype(int)
            xs = np.round(cx + t * dx + off * dy).astype(int)
            ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
            np.maximum.at(layer, (ys[ok], xs[ok]), profile[ok])


def synth_rain_layer(params: RainParams, shape, seed: int) -> np.ndarray:
    """Random streak field of shape ``(H, W, 1)``; deterministic in ``(params, shape, seed)``.

    The number of streaks is ``round(density * H * W / 1e4)``.  The
    accumulated regime splits that budget over a main layer plus two
    finer, differently angled layers.
    """
    H, W = shape
    if H < 32 or W < 32:
        raise ValueError(f"rain layer shape {shape} below 32x32 minimum")
    rng = np.random.default_rng(seed)
    layer = np.zeros((H, W))
    n_total = int(round(params.density * H * W / 1e4))
    if params.regime == "accumulated" and n_total > 0:
        n_main = int(round(0.5 * n_total))
        _draw_streaks(layer, params, n_main, rng)
        for ang, scale in ((-20.0, 0.6), (30.0, 0.45)):
            sub = RainParams(
                angle=float(np.clip(params.angle + ang, -45, 45)),
                length=float(np.clip(params.length * scale, 4, 32)),
                thickness=1,
                density=params.density,
                intensity=params.intensity * 0.7,
                regime="light",
            )
            _draw_streaks(layer, sub, (n_total - n_main) // 2, rng)
    else:
        _draw_streaks(layer, params, n_total, rng)
    return np.clip(layer, 0.0, 1.0)[:, :, None]


def expected_coverage(params: RainParams) -> float:
    """Closed-form nonzero fraction ignoring overlaps and border clipping."""
    return params.density * params.length * params.thickness / 1e4


def compose_pair(clean: np.ndarray, layer: np.ndarray, dataset_id: str = "") -> ImagePair:
    clean = as_image(clean)
    layer = np.asarray(layer, dtype=np.float64)
    if layer.ndim == 2:
        layer = layer[:, :, None]
    if layer.shape[:2] != clean.shape[:2]:
        raise ValueError(f"rain layer {layer.shape[:2]} does not match image {clean.shape[:2]}")
    return ImagePair(clamp01(clean + layer), clean, dataset_id)


def value_noise_texture(shape, seed: int, channels: int = 3, octaves: int = 4) -> np.ndarray:
    """Multi-scale value-noise texture in ``[0, 1]`` used as a clean background."""
    H, W = shape
    rng = np.random.default_rng(seed)
    img = np.zeros((H, W, channels))
    total = 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        # bilinear upsampling of a coarse random grid
        grid = rng.uniform(0, 1, size=(cells + 1, cells + 1, channels))
        gy = np.linspace(0, cells, H, endpoint=False)
        gx = np.linspace(0, cells, W, endpoint=False)
        y0, x0 = gy.astype(int), gx.astype(int)
        fy, fx = (gy - y0)[:, None, None], (gx - x0)[None, :, None]
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        layer = (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy
        amp = 0.55 ** o
        img += amp * layer
        total += amp
    img /= total
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-12)
    return 0.05 + 0.7 * img


def _clean_sources(clean_dir):
    if clean_dir is None:
        return None
    files = sorted(Path(clean_dir).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {clean_dir}")
    return files


def _crop_source(path, shape, rng) -> np.ndarray:
    img = load_image(path)
    H, W = shape
    if img.shape[0] < H or img.shape[1] < W:
        raise ValueError(f"{path} smaller than requested size {shape}")
    top = rng.integers(0, img.shape[0] - H + 1)
    left = rng.integers(0, img.shape[1] - W + 1)
    return img[top:top + H, left:left + W]


def gen_mixed_dataset(
    regimes,
    n_per_regime: int,
    out_dir,
    seed: int,
    image_size: int = 64,
    density_spread: float = 0.5,
    clean_dir=None,
) -> list[DatasetManifest]:
    """Write one paired dataset per regime under ``out_dir/<dataset_id>/``.

    Per-pair rain densities are drawn log-normally around each regime's
    density so the pooled density histogram has a long right tail.
    """
    out_dir = Path(out_dir)
    regimes = [PRESETS[r] if isinstance(r, str) else r for r in regimes]
    if n_per_regime <= 0:
        return [DatasetManifest(f"rain_{p.regime}", p.regime, p, seed) for p in regimes]
    out_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    manifests = []
    sources = _clean_sources(clean_dir)
    for ri, (params, child) in enumerate(zip(regimes, ss.spawn(len(regimes)))):
        rng = np.random.default_rng(child)
        dataset_id = f"rain_{params.regime}"
        if any(m.dataset_id == dataset_id for m in manifests):
            dataset_id = f"{dataset_id}_{ri}"
        root = out_dir / dataset_id
        (root / "rain").mkdir(parents=True, exist_ok=True)
        (root / "clean").mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(dataset_id, params.regime, params, seed, root=root)
        densities = sample_densities(params.density, n_per_regime, density_spread, rng)
        for i, dens in enumerate(densities):
            pair_seed = int(rng.integers(0, 2**31 - 1))
            if sources is None:
                clean = value_noise_texture((image_size, image_size), pair_seed)
            else:
                clean = _crop_source(sources[int(rng.integers(len(sources)))], (image_size, image_size), rng)
            layer = synth_rain_layer(params.with_density(dens), (image_size, image_size), pair_seed + 1)
            pair = compose_pair(quantize(clean), layer, dataset_id)
            rel_rain, rel_clean = f"rain/{i:04d}.png", f"clean/{i:04d}.png"
            save_image(pair.x, root / rel_rain)
            save_image(pair.y, root / rel_clean)
            manifest.pairs.append({"rain": rel_rain, "clean": rel_clean, "density": round(float(dens), 6)})
        manifest.write(root / MANIFEST_NAME)
        manifests.append(manifest)
    return manifests


def sample_densities(center: float, n: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    if center <= 0:
        return np.zeros(n)
    return np.exp(rng.normal(math.log(center), spread, size=n))


# ---------------------------------------------------------------------------
# bank retrieval


def _crop_to(entry: np.ndarray, shape) -> np.ndarray:
    H, W = shape[:2]
    if entry.shape[0] < H or entry.shape[1] < W:
        raise ValueError(f"bank entry {entry.shape[:2]} smaller than query {shape[:2]}")
    return entry[:H, :W]


def _argmax_l1(bank, query: np.ndarray) -> int:
    if len(bank) == 0:
        raise ValueError("empty bank")
    dists = [np.abs(query - _crop_to(np.asarray(e, dtype=np.float64), query.shape)).sum() for e in bank]
    # np.argmax returns the first maximal index
    return int(np.argmax(dists))


def retrieve_most_dissimilar_rain(bank, residual: np.ndarray) -> np.ndarray:
    """Bank rain layer with the largest L1 distance to ``residual``."""
    residual = np.asarray(residual, dtype=np.float64)
    i = _argmax_l1(bank, residual)
    return _crop_to(np.asarray(bank[i], dtype=np.float64), residual.shape)


def retrieve_most_dissimilar_background(bank, y: np.ndarray) -> np.ndarray:
    """Bank clean image with the largest L1 distance to ``y``."""
    y = np.asarray(y, dtype=np.float64)
    i = _argmax_l1(bank, y)
    return _crop_to(np.asarray(bank[i], dtype=np.float64), y.shape)


def batch_dissimilar_index(queries: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """For each query in ``(B, ...)``, the index of the bank entry ``(N, ...)`` farthest in L1."""
    if bank.shape[0] == 0:
        raise ValueError("empty bank")
    d = torch.cdist(queries.flatten(1).double(), bank.flatten(1).double(), p=1)
    if not torch.isfinite(d).all():
        raise ValueError("non-finite values in queries or bank")
    # torch.argmax on ties is not documented to pick the first; resolve explicitly
    best = d.max(dim=1, keepdim=True).values
    idx = torch.arange(bank.shape[0]).expand_as(d)
    return torch.where(d == best, idx, bank.shape[0]).min(dim=1).values
