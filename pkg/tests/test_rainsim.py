import json

import numpy as np
import pytest
import torch
from scipy.stats import skew

from coic.rainsim import (
    DatasetManifest, RainParams, batch_dissimilar_index, compose_pair, expected_coverage,
    gen_mixed_dataset, retrieve_most_dissimilar_background, retrieve_most_dissimilar_rain,
    sample_densities, synth_rain_layer,
)


def brute_argmax(bank, q):
    best, best_i = -1.0, -1
    for i, e in enumerate(bank):
        d = 0.0
        for v, w in zip(q.ravel(), e.ravel()):
            d += abs(float(v) - float(w))
        if d > best:
            best, best_i = d, i
    return best_i


class TestSynth:
    def test_zero_density(self):
        layer = synth_rain_layer(RainParams(density=0.0), (40, 40), 3)
        assert layer.shape == (40, 40, 1) and not layer.any()

    def test_deterministic(self):
        p = RainParams(density=30, length=14, thickness=2, angle=20)
        a = synth_rain_layer(p, (48, 64), 9)
        b = synth_rain_layer(p, (48, 64), 9)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, synth_rain_layer(p, (48, 64), 10))

    @pytest.mark.parametrize("seed", range(5))
    def test_coverage_near_expectation(self, seed):
        p = RainParams(density=50, length=12, thickness=2, angle=-25)
        frac = (synth_rain_layer(p, (64, 64), seed) > 0).mean()
        assert 0.5 * expected_coverage(p) <= frac <= 1.5 * expected_coverage(p)

    @pytest.mark.parametrize("regime", ["light", "heavy", "accumulated"])
    def test_values_in_range(self, regime):
        p = RainParams(density=60, length=20, thickness=3, regime=regime, intensity=1.0)
        layer = synth_rain_layer(p, (64, 64), 1)
        assert layer.min() >= 0 and layer.max() <= 1
        assert (layer > 0).mean() <= 1.5 * expected_coverage(p)

    def test_small_shape_rejected(self):
        with pytest.raises(ValueError):
            synth_rain_layer(RainParams(), (16, 64), 0)

    def test_param_ranges(self):
        with pytest.raises(ValueError):
            RainParams(angle=60)
        with pytest.raises(ValueError):
            RainParams(thickness=4)


class TestCompose:
    def test_zero_layer(self, rng):
        y = rng.uniform(size=(32, 32, 3))
        assert np.array_equal(compose_pair(y, np.zeros((32, 32, 1))).x, y)

    def test_uniform(self):
        pair = compose_pair(np.zeros((32, 32, 3)), np.full((32, 32, 1), 0.5))
        assert np.all(pair.x == 0.5)

    def test_residual_recovered_where_unclamped(self, rng):
        y = rng.uniform(size=(32, 32, 3))
        r = rng.uniform(0, 0.6, size=(32, 32, 1))
        pair = compose_pair(y, r)
        ok = (y + r) <= 1
        np.testing.assert_allclose((pair.x - pair.y)[ok], np.broadcast_to(r, y.shape)[ok], atol=1e-15)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            compose_pair(np.zeros((32, 32, 3)), np.zeros((16, 32, 1)))


class TestDataset:
    def test_empty(self, tmp_path):
        ms = gen_mixed_dataset(["light", "heavy"], 0, tmp_path / "d", seed=0)
        assert all(not m.pairs for m in ms)
        assert not (tmp_path / "d").exists()

    def test_counts_and_manifest(self, tmp_path):
        ms = gen_mixed_dataset(["light", "heavy"], 4, tmp_path, seed=3, image_size=32)
        pngs = list(tmp_path.rglob("*.png"))
        manifests = list(tmp_path.rglob("manifest.json"))
        assert len(pngs) == 16 and len(manifests) == 2
        doc = json.loads(manifests[0].read_text())
        assert set(doc) == {"dataset_id", "regime", "seed", "rain_params", "pairs"}
        assert {"rain", "clean"} <= set(doc["pairs"][0])
        m = DatasetManifest.read(manifests[0])
        pairs, missing = m.load_pairs()
        assert not missing and len(pairs) == 4
        assert pairs[0].x.shape == pairs[0].y.shape == (32, 32, 3)
        assert ms[0].dataset_id == "rain_light"

    def test_byte_identical_regeneration(self, tmp_path):
        gen_mixed_dataset(["light", "accumulated"], 3, tmp_path / "a", seed=5, image_size=32)
        gen_mixed_dataset(["light", "accumulated"], 3, tmp_path / "b", seed=5, image_size=32)
        fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert fa == fb
        for rel in fa:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_pooled_densities_long_tailed(self):
        rng = np.random.default_rng(0)
        pooled = np.concatenate([sample_densities(c, 200, 0.5, rng) for c in (25.0, 45.0, 60.0)])
        assert skew(pooled) > 0

    def test_missing_files_reported(self, tmp_path):
        ms = gen_mixed_dataset(["light"], 2, tmp_path, seed=0, image_size=32)
        (tmp_path / "rain_light" / "rain" / "0001.png").unlink()
        pairs, missing = DatasetManifest.read(tmp_path / "rain_light").load_pairs()
        assert len(pairs) == 1 and len(missing) == 1
        assert ms


class TestRetrieval:
    def test_single(self, rng):
        e = rng.uniform(size=(8, 8, 1))
        assert np.array_equal(retrieve_most_dissimilar_rain([e], rng.uniform(size=(8, 8, 1))), e)
        assert np.array_equal(retrieve_most_dissimilar_background([e], rng.uniform(size=(8, 8, 3))[..., :1]), e)

    def test_zero_vs_self(self, rng):
        res = rng.uniform(size=(8, 8, 1))
        zero = np.zeros_like(res)
        assert np.array_equal(retrieve_most_dissimilar_rain([zero, res], res), zero)
        assert np.array_equal(retrieve_most_dissimilar_rain([res, zero], res), zero)

    def test_background_complement(self, rng):
        y = rng.uniform(size=(8, 8, 3))
        assert np.array_equal(retrieve_most_dissimilar_background([y, 1 - y], y), 1 - y)

    def test_tie_lowest_index(self):
        q = np.zeros((4, 4, 1))
        bank = [np.ones((4, 4, 1)), np.ones((4, 4, 1)) * -1]
        assert np.array_equal(retrieve_most_dissimilar_rain(bank, q), bank[0])

    def test_crops_larger_entries(self, rng):
        big = rng.uniform(size=(12, 12, 1))
        out = retrieve_most_dissimilar_rain([big], np.zeros((8, 8, 1)))
        assert out.shape == (8, 8, 1) and np.array_equal(out, big[:8, :8])

    def test_empty(self):
        with pytest.raises(ValueError):
            retrieve_most_dissimilar_rain([], np.zeros((4, 4, 1)))
        with pytest.raises(ValueError):
            retrieve_most_dissimilar_background([], np.zeros((4, 4, 1)))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_bank_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        bank = [rng.uniform(size=(6, 6, 1)) for _ in range(8)]
        q = rng.uniform(size=(6, 6, 1))
        i = brute_argmax(bank, q)
        assert np.array_equal(retrieve_most_dissimilar_rain(bank, q), bank[i])
        assert np.array_equal(retrieve_most_dissimilar_background(bank, q), bank[i])

    def test_batched_index_matches_brute_force(self):
        rng = np.random.default_rng(7)
        q = rng.uniform(size=(5, 3, 6, 6))
        bank = rng.uniform(size=(7, 3, 6, 6))
        idx = batch_dissimilar_index(torch.from_numpy(q), torch.from_numpy(bank))
        assert idx.tolist() == [brute_argmax(list(bank), qq) for qq in q]

    def test_batched_ties_lowest_index(self):
        q = torch.zeros(2, 1, 2, 2)
        bank = torch.stack([torch.ones(1, 2, 2), -torch.ones(1, 2, 2), torch.ones(1, 2, 2)])
        assert batch_dissimilar_index(q, bank).tolist() == [0, 0]
