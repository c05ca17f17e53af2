import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coic.encoder import (
    EncoderConfig, FeatureExtractor, InstanceEncoder, augment, gap, make_momentum_twin, momentum_update,
)


@pytest.fixture(scope="module")
def enc():
    torch.manual_seed(0)
    return InstanceEncoder()


def test_feature_shape(enc):
    F = enc.features(torch.rand(2, 3, 64, 64))
    assert F.shape == (2, 256, 8, 8)
    assert EncoderConfig().out_channels == 256


def test_features_deterministic(enc):
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(enc.features(x), enc.features(x.clone()))


def test_indivisible_rejected(enc):
    with pytest.raises(ValueError):
        enc.features(torch.rand(1, 3, 36, 32))


def test_zero_final_conv_gives_zero_map():
    fe = FeatureExtractor()
    torch.nn.init.zeros_(fe.final_conv.weight)
    torch.nn.init.zeros_(fe.final_conv.bias)
    assert not fe(torch.rand(2, 3, 16, 16)).any()


def test_leaky_slope():
    fe = FeatureExtractor()
    slopes = {m.negative_slope for m in fe.modules() if isinstance(m, torch.nn.LeakyReLU)}
    assert slopes == {0.1}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_embedding_unit_norm(seed):
    torch.manual_seed(seed % 1000)
    enc = InstanceEncoder()
    g = torch.Generator().manual_seed(seed)
    z = enc(torch.rand(2, 3, 16, 16, generator=g))
    assert z.shape == (2, 128)
    assert torch.allclose(z.norm(dim=1), torch.ones(2), atol=1e-6)


def test_gap_permutation_invariance(enc):
    F = torch.randn(2, 256, 4, 4)
    perm = torch.randperm(16)
    Fs = F.flatten(2)[:, :, perm].reshape_as(F)
    assert torch.allclose(enc.embed_features(F), enc.embed_features(Fs), atol=1e-6)


def test_projector_scale_invariance(enc):
    F = torch.randn(1, 256, 2, 2)
    z1 = enc.embed_features(F)
    lin = enc.projector.net[-1]
    with torch.no_grad():
        lin.weight.mul_(5)
        lin.bias.mul_(5)
    try:
        assert torch.allclose(enc.embed_features(F), z1, atol=1e-6)
    finally:
        with torch.no_grad():
            lin.weight.div_(5)
            lin.bias.div_(5)


def test_zero_projection_raises():
    enc = InstanceEncoder()
    lin = enc.projector.net[-1]
    torch.nn.init.zeros_(lin.weight)
    torch.nn.init.zeros_(lin.bias)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 8, 8))


class TestMomentum:
    def _pair(self):
        a = FeatureExtractor(EncoderConfig(n_downsamples=1))
        b = make_momentum_twin(a)
        with torch.no_grad():
            for p in b.parameters():
                p.add_(1.0)
        return a, b

    def test_m_one_keeps_twin(self):
        a, b = self._pair()
        before = copy.deepcopy(b.state_dict())
        momentum_update(a, b, 1.0)
        for k, v in b.state_dict().items():
            assert torch.equal(v, before[k])

    def test_m_zero_copies(self):
        a, b = self._pair()
        momentum_update(a, b, 0.0)
        for k, v in b.state_dict().items():
            assert torch.equal(v, a.state_dict()[k])

    def test_step_size(self):
        a, b = self._pair()
        momentum_update(a, b, 0.999)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.allclose(pb - pa, torch.full_like(pa, 0.999), atol=1e-5)

    def test_geometric_convergence(self):
        a, b = self._pair()
        a, b = a.double(), b.double()
        d0 = [(pb - pa).clone() for pa, pb in zip(a.parameters(), b.parameters())]
        m, k = 0.9, 25
        for _ in range(k):
            momentum_update(a, b, m)
        for d, pa, pb in zip(d0, a.parameters(), b.parameters()):
            assert torch.allclose(pb - pa, d * m ** k, atol=1e-6)

    def test_twin_gets_no_gradient(self):
        a, b = self._pair()
        assert all(not p.requires_grad for p in b.parameters())
        out = b(torch.rand(1, 3, 8, 8)).sum() + a(torch.rand(1, 3, 8, 8)).sum()
        out.backward()
        assert all(p.grad is None for p in b.parameters())

    def test_shape_mismatch(self):
        a = FeatureExtractor(EncoderConfig(n_downsamples=1))
        b = make_momentum_twin(FeatureExtractor(EncoderConfig(n_downsamples=1, base_channels=8)))
        with pytest.raises(ValueError):
            momentum_update(a, b, 0.5)


class TestAugment:
    def test_disabled_is_identity(self):
        x = torch.rand(3, 16, 16)
        assert torch.equal(augment(x, 3, crop=False, flip=False), x)

    def test_seeded(self):
        x = torch.rand(4, 3, 16, 16)
        assert torch.equal(augment(x, 11), augment(x, 11))
        assert augment(x, 11).shape == x.shape

    def test_flip_involution(self):
        x = torch.rand(3, 16, 16)
        seed = next(s for s in range(100) if not torch.equal(augment(x, s, crop=False), x))
        once = augment(x, seed, crop=False)
        assert torch.equal(once, x.flip(-1))
        assert torch.equal(augment(once, seed, crop=False), x)
