"""What the encoder learned: awareness scores, dataset similarities, 2D views, temperatures."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .coim import temperature_profile
from .encoder import gap
from .imagecore import ImagePair, clamp01, to_tensor
from .models import ToyUNet
from .rainsim import retrieve_most_dissimilar_background


@dataclass(frozen=True)
class AwarenessScores:
    zeta_B: float
    zeta_R: float


def _pooled(encoder, imgs) -> torch.Tensor:
    return gap(encoder.features(to_tensor(imgs))).double()


def _cos(a: torch.Tensor, b: torch.Tensor) -> float:
    # identical vectors are exactly aligned; skip the rounding of the quotient
    if torch.equal(a, b):
        return 1.0
    c = float((a @ b) / (a.norm() * b.norm()))
    return min(1.0, max(-1.0, c))


@torch.no_grad()
def awareness(encoder, pair: ImagePair, clean_bank) -> AwarenessScores:
    """Cosine of pooled features of ``x`` against ``y`` (detail) and against ``b~ + (x - y)`` (rain)."""
    b_tilde = retrieve_most_dissimilar_background(clean_bank, pair.y)
    x_prime = clamp01(b_tilde + pair.residual)
    p = _pooled(encoder, [pair.x, pair.y, x_prime])
    return AwarenessScores(zeta_B=_cos(p[0], p[1]), zeta_R=_cos(p[0], p[2]))


@torch.no_grad()
def awareness_table(encoder, manifests) -> list[dict]:
    """Per-pair scores; the clean bank is every clean image across all manifests."""
    loaded = [(m, m.load_pairs()[0]) for m in manifests]
    bank = [p.y for _, pairs in loaded for p in pairs]
    rows = []
    for m, pairs in loaded:
        for i, p in enumerate(pairs):
            s = awareness(encoder, p, bank)
            rows.append({"dataset_id": m.dataset_id, "index": i,
                         "density": m.pairs[i].get("density", float("nan")),
                         "zeta_B": s.zeta_B, "zeta_R": s.zeta_R})
    return rows


@dataclass
class SimilarityMatrix:
    ids: list
    matrix: np.ndarray


def similarity_from_embeddings(groups) -> np.ndarray:
    """Mean pairwise cosine similarity between the embeddings of each group pair.

    Diagonal entries skip self-pairs.
    """
    def unit(e):
        e = np.asarray(e, dtype=np.float64)
        return e / np.linalg.norm(e, axis=1, keepdims=True)

    n = len(groups)
    M = np.zeros((n, n))
    for a in range(n):
        ea = unit(groups[a])
        for b in range(a, n):
            eb = unit(groups[b])
            G = ea @ eb.T
            if a == b:
                k = len(ea)
                if k < 2:
                    raise ValueError(f"group {a} needs at least 2 embeddings")
                M[a, a] = (G.sum() - np.trace(G)) / (k * (k - 1))
            else:
                M[a, b] = M[b, a] = G.mean()
    return np.clip(M, -1.0, 1.0)


@torch.no_grad()
def embed_images(encoder, imgs, batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(imgs), batch_size):
        out.append(encoder(to_tensor(imgs[i:i + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.cfg.embed_dim))


def similarity_matrix(encoder, manifests, n_per_dataset: int, seed: int = 0) -> SimilarityMatrix:
    rng = np.random.default_rng(seed)
    ids, groups = [], []
    for m in manifests:
        pairs, _ = m.load_pairs()
        if len(pairs) < 2 or n_per_dataset < 2:
            raise ValueError(f"dataset {m.dataset_id!r} has too few images to sample "
                             f"(have {len(pairs)}, requested {n_per_dataset}, need >= 2)")
        k = min(n_per_dataset, len(pairs))
        pick = np.sort(rng.choice(len(pairs), size=k, replace=False))
        groups.append(embed_images(encoder, [pairs[i].x for i in pick]))
        ids.append(m.dataset_id)
    return SimilarityMatrix(ids, similarity_from_embeddings(groups))


def project_2d(embeddings) -> np.ndarray:
    """PCA onto two components; each component's largest-magnitude loading is made positive."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 3:
        raise ValueError("need at least 3 embeddings as an (n, d) array")
    X = E - E.mean(axis=0)
    out = np.zeros((E.shape[0], 2))
    if np.allclose(X, 0.0):
        return out
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    for j in range(min(2, len(s))):
        if s[j] <= 1e-12 * max(s[0], 1.0):
            continue
        v = Vt[j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = X @ v
    return out


# ---------------------------------------------------------------------------
# layer-wise temperatures


@torch.no_grad()
def collect_temperatures(model, probe_images, encoder):
    """Per conv layer, the stacked ``TemperatureProfile`` over probe images."""
    if not isinstance(model, ToyUNet):
        raise TypeError("temperature reports need a modulated CNN (ToyUNet)")
    if not model.modulated:
        raise TypeError("model is not modulated")
    layers = model.conv_layers()
    for _, m in layers:
        m.record_context = True
    try:
        x = to_tensor(probe_images)
        model(x, encoder(x))
        profiles = [(name, temperature_profile(m.last_context)) for name, m in layers]
    finally:
        for _, m in layers:
            m.record_context = False
            m.last_context = None
    return profiles


def temperature_report(model, probe_images, encoder) -> tuple[list[dict], list[tuple]]:
    """Layer statistics of ``log T`` and the per-channel-pair profile.

    Returns ``(rows, profile)``: ``rows`` has mean and a normal-approximation
    95% CI per layer (over probes and channel pairs, finite entries only);
    ``profile`` holds ``(layer_index, c, c_prime, log_T)`` averaged over probes.
    """
    rows, profile = [], []
    for li, (name, prof) in enumerate(collect_temperatures(model, probe_images, encoder)):
        finite = ~prof.infinite
        n_inf = int(prof.infinite.sum())
        row = {"layer_index": li, "layer": name, "n_probes": int(prof.T.shape[0]), "n_infinite": n_inf}
        if finite.any():
            logT = prof.log_T[finite].double()
            vals = logT.flatten().numpy()
            mean = float(vals.mean())
            half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
            row.update(mean_log_T=mean, ci_low=mean - half, ci_high=mean + half, infinite=False)
            per_pair = logT.mean(dim=0).numpy()
            for c in range(per_pair.shape[0]):
                for cp in range(per_pair.shape[1]):
                    profile.append((li, c, cp, float(per_pair[c, cp])))
        else:
            row.update(mean_log_T=math.inf, ci_low=math.inf, ci_high=math.inf, infinite=True)
        rows.append(row)
    return rows, profile


def write_rows_csv(rows, path, columns=None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_similarity_csv(sm: SimilarityMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_id"] + list(sm.ids))
        for i, name in enumerate(sm.ids):
            w.writerow([name] + [f"{v:.8f}" for v in sm.matrix[i]])
