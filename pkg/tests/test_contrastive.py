import math

import numpy as np
import pytest
import torch

from coic.contrastive import (
    blur_batch, build_negatives, contrastive_loss, loss_from_similarities, similarities,
)
from coic.imagecore import ImagePair, gaussian_blur, to_tensor

from fd import central_diff, rel_err


def loss_scalar(s_pos, s_negs):
    # plain-arithmetic evaluation of the loss formula
    num = math.exp(s_pos)
    return -math.log(num / (num + sum(math.exp(s) for s in s_negs)))


def feats(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class TestLossValues:
    def test_uniform_similarity_is_log6(self):
        sims = torch.zeros(3, 6, dtype=torch.float64) + 0.3
        assert loss_from_similarities(sims).tolist() == pytest.approx([math.log(6)] * 3, abs=1e-12)

    def test_identical_features_give_log6(self):
        F = feats(2, 8, 4, 4).abs() + 0.1
        det = F[:, None].repeat(1, 4, 1, 1, 1)
        assert float(contrastive_loss(F, F, F, det)) == pytest.approx(math.log(6), abs=1e-9)

    def test_extreme_cosines(self):
        # s_pos = 1, five negatives at -1: log(1 + 5 e^-2)
        expected = loss_scalar(1.0, [-1.0] * 5)
        assert expected == pytest.approx(math.log(1 + 5 * math.exp(-2)), abs=1e-12)
        assert expected == pytest.approx(0.5168135, abs=1e-7)
        F = torch.ones(1, 8, 4, 4, dtype=torch.float64)
        det = (-F)[:, None].repeat(1, 4, 1, 1, 1)
        assert float(contrastive_loss(F, F * 2.0, -F, det)) == pytest.approx(expected, abs=1e-12)

    def test_bounds(self):
        for seed in range(20):
            sims = torch.empty(1, 6, dtype=torch.float64).uniform_(-1, 1, generator=torch.Generator().manual_seed(seed))
            v = float(loss_from_similarities(sims))
            assert 0 < v <= math.log(1 + 5 * math.e ** 2)

    def test_matches_scalar_formula(self):
        F, K, R = feats(1, 8, 4, 4, seed=1), feats(1, 8, 4, 4, seed=2), feats(1, 8, 4, 4, seed=3)
        D = feats(1, 4, 8, 4, 4, seed=4)
        s = similarities(F, K, R, D)[0].tolist()
        assert float(contrastive_loss(F, K, R, D)) == pytest.approx(loss_scalar(s[0], s[1:]), abs=1e-12)


class TestLossProperties:
    def test_monotone_in_positive_similarity(self):
        negs = [0.1, -0.2, 0.3, 0.0, 0.5]
        vals = [float(loss_from_similarities(torch.tensor([[s] + negs]))) for s in np.linspace(-1, 1, 21)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_scale_invariance(self):
        F, K, R = feats(2, 8, 4, 4, seed=5), feats(2, 8, 4, 4, seed=6), feats(2, 8, 4, 4, seed=7)
        D = feats(2, 4, 8, 4, 4, seed=8)
        base = contrastive_loss(F, K, R, D)
        for mode in ("pooled", "spatial"):
            a = contrastive_loss(F, K, R, D, mode=mode)
            b = contrastive_loss(3.0 * F, 0.5 * K, 7.0 * R, 2.0 * D, mode=mode)
            assert torch.allclose(a, b, atol=1e-12)
        assert torch.isfinite(base)

    @pytest.mark.parametrize("mode", ["pooled", "spatial"])
    def test_gradient_matches_finite_differences(self, mode):
        F, K, R = feats(1, 8, 4, 4, seed=9), feats(1, 8, 4, 4, seed=10), feats(1, 8, 4, 4, seed=11)
        D = feats(1, 4, 8, 4, 4, seed=12)
        Fg = F.clone().requires_grad_(True)
        contrastive_loss(Fg, K, R, D, mode=mode).backward()
        num = central_diff(lambda t: contrastive_loss(t, K, R, D, mode=mode), F)
        assert rel_err(Fg.grad, num) < 1e-4

    def test_zero_pooled_vector_raises(self):
        F = torch.zeros(1, 8, 2, 2)
        with pytest.raises(ValueError):
            contrastive_loss(F, F, F, F[:, None].repeat(1, 4, 1, 1, 1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            contrastive_loss(feats(1, 8, 4, 4), feats(1, 8, 2, 2), feats(1, 8, 4, 4), feats(1, 4, 8, 4, 4))


class TestNegatives:
    def _pair(self, rng):
        y = rng.uniform(0, 0.5, size=(16, 16, 3))
        r = np.zeros((16, 16, 1))
        r[2:10, 5:7] = 0.4
        return ImagePair(np.clip(y + r, 0, 1), y), r

    def test_own_residual_gives_zero_layer(self, rng):
        pair, r = self._pair(rng)
        neg = build_negatives(pair, [pair.residual, np.zeros_like(pair.residual)], rng_seed=0)
        np.testing.assert_array_equal(neg.rain_negative, pair.y)
        assert len(neg.detail_negatives) == 4
        assert all(0.3 <= s <= 1.5 for s in neg.sigmas)

    def test_deterministic(self, rng):
        pair, r = self._pair(rng)
        a = build_negatives(pair, [r, 0.5 * r], rng_seed=42)
        b = build_negatives(pair, [r, 0.5 * r], rng_seed=42)
        assert a.sigmas == b.sigmas
        for u, v in zip(a.detail_negatives, b.detail_negatives):
            np.testing.assert_array_equal(u, v)

    def test_blur_distance_monotone(self, rng):
        pair, _ = self._pair(rng)
        bank = [pair.residual]
        lo = build_negatives(pair, bank, 0, sigmas=[0.3] * 4).detail_negatives[0]
        hi = build_negatives(pair, bank, 0, sigmas=[1.5] * 4).detail_negatives[0]
        assert np.linalg.norm(lo - pair.y) < np.linalg.norm(hi - pair.y)

    def test_argmax_excludes_zero_distance_entry(self, rng):
        for seed in range(20):
            g = np.random.default_rng(seed)
            pair, _ = self._pair(g)
            others = [g.uniform(0, 0.3, size=(16, 16, 3)) for _ in range(3)]
            bank = [pair.residual] + others
            neg = build_negatives(pair, bank, 0)
            assert not np.array_equal(neg.rain_negative, pair.x)

    def test_batched_blur_matches_numpy(self, rng):
        ys = [rng.uniform(size=(12, 12, 3)) for _ in range(2)]
        sig = np.array([[0.3, 1.5, 0.8], [1.1, 0.5, 1.49]])
        out = blur_batch(to_tensor(ys, dtype=torch.float64), sig)
        for b in range(2):
            for j in range(3):
                ref = gaussian_blur(ys[b], sig[b, j]).transpose(2, 0, 1)
                np.testing.assert_allclose(out[b, j].numpy(), ref, atol=1e-12)
