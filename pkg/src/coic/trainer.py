"""Joint training of a derainer with the contrastive embedding constraint.

Each step minimises ``fidelity(f(x, z), y) + lambda * contrastive`` over a
batch drawn across datasets.  All per-step randomness derives from
``(seed, step)``, so a run resumed from a checkpoint replays the same
batches as an uninterrupted one.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .contrastive import batch_rain_negatives, blur_batch, contrastive_loss, sample_sigmas
from .encoder import EncoderConfig, InstanceEncoder, augment, make_momentum_twin, momentum_update
from .imagecore import from_tensor, psnr, ssim, to_tensor
from .models import build_model, count_params
from .models import forward as restore

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.2
    batch_size: int = 4
    patch_size: int = 32
    lr: float = 2e-4
    iterations: int = 2000
    seed: int = 0
    n_b: int = 4
    sigma_range: tuple = (0.3, 1.5)
    momentum: float = 0.999
    fidelity: str = "L1"
    model: str = "unet"
    width: int = 16
    modulated: bool = True
    embed_dim: int = 128
    sampling: str = "uniform"
    contrast_mode: str = "pooled"

    def __post_init__(self):
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        lo, hi = self.sigma_range
        if not 0 < lo < hi:
            raise ConfigError(f"sigma_range must satisfy 0 < low < high, got {self.sigma_range}")
        if self.fidelity not in ("L1", "MSE"):
            raise ConfigError(f"fidelity must be L1 or MSE, got {self.fidelity!r}")
        if self.sampling not in ("uniform", "proportional"):
            raise ConfigError(f"sampling must be uniform or proportional, got {self.sampling!r}")
        if self.model not in ("unet", "former"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.patch_size % 8:
            raise ConfigError("patch_size must be a multiple of 8")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("momentum must be in [0, 1]")

    # ``lambda`` is the user-facing key
    @classmethod
    def keys(cls) -> list[str]:
        return ["lambda" if f.name == "lam" else f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        for k, v in list(d.items()):
            default = getattr(cls, k, None) if k != "sigma_range" else None
            if isinstance(default, bool):
                d[k] = _parse_bool(v)
            elif isinstance(default, int):
                d[k] = int(v)
            elif isinstance(default, float):
                d[k] = float(v)
            elif k == "sigma_range" and isinstance(v, str):
                d[k] = tuple(float(s) for s in v.split(","))
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update({("lambda" if k == "lam" else k): v for k, v in kw.items()})
        return TrainConfig.from_dict(d)


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    unknown = set(d) - set(TrainConfig.keys())
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return d


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# data


class TrainData:
    """In-memory pairs grouped by dataset, as ``(N, C, H, W)`` tensors."""

    def __init__(self, manifests):
        self.ids, self.x, self.y = [], [], []
        for m in manifests:
            pairs, missing = m.load_pairs()
            if missing:
                raise FileNotFoundError(f"{m.dataset_id}: missing files {missing[:3]}")
            if not pairs:
                continue
            self.ids.append(m.dataset_id)
            self.x.append(to_tensor([p.x for p in pairs]))
            self.y.append(to_tensor([p.y for p in pairs]))
        if not self.ids:
            raise ValueError("no training pairs")

    def sample(self, cfg: TrainConfig, rng: np.random.Generator):
        P, B = cfg.patch_size, cfg.batch_size
        sizes = [t.shape[0] for t in self.x]
        xs, ys, tags = [], [], []
        for _ in range(B):
            if cfg.sampling == "uniform":
                d = int(rng.integers(len(sizes)))
                i = int(rng.integers(sizes[d]))
            else:
                flat = int(rng.integers(sum(sizes)))
                d = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
                i = flat - int(np.sum(sizes[:d]))
            H, W = self.x[d].shape[-2:]
            if H < P or W < P:
                raise ValueError(f"{self.ids[d]}: images {H}x{W} smaller than patch {P}")
            top, left = int(rng.integers(H - P + 1)), int(rng.integers(W - P + 1))
            xs.append(self.x[d][i, :, top:top + P, left:left + P])
            ys.append(self.y[d][i, :, top:top + P, left:left + P])
            tags.append(self.ids[d])
        return torch.stack(xs), torch.stack(ys), tags


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    tags: list
    sigmas: np.ndarray
    aug_seed: int


def make_batch(data: TrainData, cfg: TrainConfig, step: int) -> Batch:
    rng = step_rng(cfg.seed, step)
    x, y, tags = data.sample(cfg, rng)
    sigmas = np.stack([sample_sigmas(rng, cfg.n_b, cfg.sigma_range) for _ in range(len(tags))])
    return Batch(x, y, tags, sigmas, int(rng.integers(2**31 - 1)))


def iter_batches(data, cfg, start, stop, workers=1):
    """Batches for steps ``[start, stop)`` in step order, optionally prefetched by threads."""
    if workers <= 1 or os.environ.get("COIM_DETERMINISTIC") == "1":
        for s in range(start, stop):
            yield s, make_batch(data, cfg, s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # executor.map preserves submission order
        yield from zip(range(start, stop), pool.map(lambda s: make_batch(data, cfg, s), range(start, stop)))


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    cfg: TrainConfig
    model: torch.nn.Module
    encoder: InstanceEncoder | None
    twin: torch.nn.Module | None
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)

    def parameters(self):
        params = list(self.model.parameters())
        if self.encoder is not None:
            params += list(self.encoder.parameters())
        return params


def build_networks(cfg: TrainConfig):
    """Model, encoder and momentum twin with seed-determined initialisation.

    Base weights of a modulated model are copied from the unmodulated
    build with the same seed, so the two variants start identically.
    """
    torch.manual_seed(cfg.seed)
    base = build_model(cfg.model, cfg.width, cfg.embed_dim, modulated=False)
    if not cfg.modulated:
        return base, None, None
    torch.manual_seed(cfg.seed + 1)
    model = build_model(cfg.model, cfg.width, cfg.embed_dim, modulated=True)
    missing, unexpected = model.load_state_dict(base.state_dict(), strict=False)
    assert not unexpected
    torch.manual_seed(cfg.seed + 2)
    encoder = InstanceEncoder(EncoderConfig(embed_dim=cfg.embed_dim, momentum=cfg.momentum))
    twin = make_momentum_twin(encoder.extractor)
    return model, encoder, twin


def init_state(cfg: TrainConfig) -> TrainState:
    torch.use_deterministic_algorithms(True)
    model, encoder, twin = build_networks(cfg)
    params = list(model.parameters()) + (list(encoder.parameters()) if encoder is not None else [])
    opt = torch.optim.Adam(params, lr=cfg.lr)
    return TrainState(cfg, model, encoder, twin, opt)


def lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, cfg.iterations) / max(cfg.iterations, 1)))


def fidelity_loss(out, y, kind="L1"):
    return F.l1_loss(out, y) if kind == "L1" else F.mse_loss(out, y)


def compute_losses(state: TrainState, batch: Batch):
    """Forward pass for one batch: ``(total, fidelity, contrastive)`` tensors."""
    cfg = state.cfg
    x, y = batch.x, batch.y
    z = None
    con = torch.zeros(())
    if state.encoder is not None:
        feats = state.encoder.features(x)
        z = state.encoder.embed_features(feats)
        with torch.no_grad():
            x_neg = batch_rain_negatives(x, y)
            x_k = augment(x, batch.aug_seed)
            y_blur = blur_batch(y, batch.sigmas).flatten(0, 1)
            keys = state.twin(torch.cat([x_k, x_neg, y_blur]))
        B = x.shape[0]
        f_k, f_neg = keys[:B], keys[B:2 * B]
        f_det = keys[2 * B:].reshape(B, cfg.n_b, *keys.shape[1:])
        con = contrastive_loss(feats, f_k, f_neg, f_det, mode=cfg.contrast_mode)
    out = state.model(x, z)
    fid = fidelity_loss(out, y, cfg.fidelity)
    total = fid + cfg.lam * con
    return total, fid, con


def _dump_and_raise(state, batch, values, dump_dir):
    msg = f"non-finite loss at step {state.step}: {values}" if isinstance(values, dict) else \
        f"non-finite values at step {state.step}: {values}"
    if dump_dir is not None:
        p = Path(dump_dir) / f"nan_step{state.step}.npz"
        p.parent.mkdir(parents=True, exist_ok=True)
        np.savez(p, x=batch.x.numpy(), y=batch.y.numpy(), sigmas=batch.sigmas)
        msg += f"; inputs dumped to {p}"
    raise TrainingError(msg)


def train_step(state: TrainState, batch: Batch, dump_dir=None) -> TrainState:
    cfg = state.cfg
    if not (torch.isfinite(batch.x).all() and torch.isfinite(batch.y).all()):
        _dump_and_raise(state, batch, "non-finite input batch", dump_dir)
    total, fid, con = compute_losses(state, batch)
    values = {"fidelity": float(fid.detach()), "contrastive": float(con.detach()), "total": float(total.detach())}
    if not all(math.isfinite(v) for v in values.values()):
        _dump_and_raise(state, batch, values, dump_dir)
    for g in state.optimizer.param_groups:
        g["lr"] = lr_at(cfg, state.step)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.encoder is not None:
        momentum_update(state.encoder.extractor, state.twin, cfg.momentum)
    # recorded total is recomposed from the recorded terms
    state.history.append({
        "step": state.step,
        "fidelity": values["fidelity"],
        "contrastive": values["contrastive"],
        "total": values["fidelity"] + cfg.lam * values["contrastive"],
    })
    state.step += 1
    return state


def train(cfg: TrainConfig, manifests, out_dir=None, state: TrainState | None = None,
          until: int | None = None, workers: int = 1, log_every: int = 0) -> TrainState:
    data = TrainData(manifests)
    if state is None:
        state = init_state(cfg)
    stop = cfg.iterations if until is None else until
    for s, batch in iter_batches(data, cfg, state.step, stop, workers):
        train_step(state, batch, dump_dir=out_dir)
        if log_every and (s + 1) % log_every == 0:
            h = state.history[-1]
            log.info("step %d fidelity %.5f contrastive %.4f", s + 1, h["fidelity"], h["contrastive"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(state.history, out_dir / "losses.csv")
        save_state(state, out_dir / "checkpoint.coic")
    return state


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fidelity", "contrastive", "total"])
        for h in history:
            w.writerow([h["step"], repr(h["fidelity"]), repr(h["contrastive"]), repr(h["total"])])


def read_history(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# checkpoints


def save_state(state: TrainState, path) -> Path:
    tensors = ckpt.prefixed(state.model, "model.")
    if state.encoder is not None:
        tensors.update(ckpt.prefixed(state.encoder, "encoder."))
        tensors.update(ckpt.prefixed(state.twin, "twin."))
    opt_steps = []
    for i, p in enumerate(state.parameters()):
        st = state.optimizer.state.get(p, {})
        if st:
            tensors[f"optim.{i}.exp_avg"] = st["exp_avg"]
            tensors[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"]
            opt_steps.append(float(st["step"]))
        else:
            opt_steps.append(None)
    meta = {
        "format": "coic-checkpoint-1",
        "config": state.cfg.to_dict(),
        "step": state.step,
        "history": state.history,
        "optim_steps": opt_steps,
        "params": {"all": count_params(state.model), "modulation": count_params(state.model, "modulation")},
    }
    return ckpt.save_tensors(path, tensors, meta)


def load_state(path) -> TrainState:
    tensors, meta = ckpt.load_tensors(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    ckpt.load_into(state.model, tensors, "model.")
    if state.encoder is not None:
        ckpt.load_into(state.encoder, tensors, "encoder.")
        ckpt.load_into(state.twin, tensors, "twin.")
    for i, (p, n) in enumerate(zip(state.parameters(), meta["optim_steps"])):
        if n is None:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(n),
            "exp_avg": tensors[f"optim.{i}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"].clone(),
        }
    state.step = int(meta["step"])
    state.history = list(meta["history"])
    return state


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: list
    missing: dict

    def by_dataset(self) -> dict:
        return {r["dataset_id"]: r for r in self.rows}


def _pad_to(x, f):
    H, W = x.shape[-2:]
    ph, pw = (-H) % f, (-W) % f
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, H, W


@torch.no_grad()
def restore_images(model, encoder, x: torch.Tensor) -> torch.Tensor:
    f = max(getattr(model, "factor", 1), encoder.extractor.factor if encoder is not None else 1)
    xp, H, W = _pad_to(x, f)
    z = encoder(xp) if (encoder is not None and getattr(model, "modulated", False)) else None
    return restore(model, xp, z)[..., :H, :W]


@torch.no_grad()
def evaluate(model, encoder, manifests, batch_size: int = 8) -> EvalReport:
    """Mean PSNR/SSIM of restored images per dataset."""
    model.eval()
    rows, missing = [], {}
    for m in manifests:
        pairs, gone = m.load_pairs()
        if gone:
            missing[m.dataset_id] = gone
            continue
        if not pairs:
            continue
        ps, ss = [], []
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            out = from_tensor(restore_images(model, encoder, to_tensor([p.x for p in chunk])))
            for o, p in zip(out, chunk):
                ps.append(psnr(o, p.y))
                ss.append(ssim(o, p.y))
        rows.append({"dataset_id": m.dataset_id, "n": len(pairs),
                     "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))})
    model.train()
    return EvalReport(rows, missing)


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_id", "n", "psnr", "ssim"])
        for r in report.rows:
            w.writerow([r["dataset_id"], r["n"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])


def lambda_sweep(cfg: TrainConfig, values, train_manifests, eval_manifests, workers: int = 1) -> list[dict]:
    """Train one model per lambda value and report held-out PSNR per dataset."""
    values = [float(v) for v in values]
    if not values or not all(math.isfinite(v) for v in values):
        raise ConfigError("lambda values must be a non-empty list of finite numbers")
    rows = []
    for lam in values:
        row = {"lambda": lam}
        try:
            state = train(cfg.replace(lam=lam), train_manifests, workers=workers)
            rep = evaluate(state.model, state.encoder, eval_manifests)
            for r in rep.rows:
                row[f"psnr_{r['dataset_id']}"] = r["psnr"]
            row["psnr_mean"] = float(np.mean([r["psnr"] for r in rep.rows])) if rep.rows else float("nan")
            row["error"] = ""
        except Exception as e:  # one failed cell must not stop the sweep
            log.exception("lambda=%s failed", lam)
            row["psnr_mean"] = float("nan")
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
    return rows
