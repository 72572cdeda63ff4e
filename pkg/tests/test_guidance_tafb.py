import numpy as np
import pytest
import torch

from facediff.guidance import GuidancePyramid, extract_pyramid
from facediff.nnblocks import grad_check, init_weights, layernorm2d, timestep_embedding, zero_module
from facediff.tafb import TAFB, TimeWeightMLP, sft_modulate

from helpers import randn, randomize


def test_pyramid_single_level():
    pyr = GuidancePyramid((16,))
    feats = extract_pyramid(torch.rand(1, 3, 12, 12), timestep_embedding([3]), pyr)
    assert len(feats) == 1 and feats[0].shape == (1, 16, 12, 12)


def test_pyramid_sizes_default_widths():
    pyr = GuidancePyramid()
    feats = pyr(torch.rand(2, 3, 64, 64), timestep_embedding([3, 9]))
    assert [f.shape[-1] for f in feats] == [64, 32, 16, 8]
    assert [f.shape[1] for f in feats] == [32, 64, 128, 128]


def test_pyramid_indivisible():
    with pytest.raises(ValueError):
        GuidancePyramid()(torch.rand(1, 3, 36, 36), timestep_embedding([1]))


def test_pyramid_deterministic_and_time_dependent():
    pyr = randomize(GuidancePyramid((8, 16)).double(), scale=0.2)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    e1 = timestep_embedding([10], 64, torch.float64)
    a, b = pyr(x, e1), pyr(x, e1)
    assert all(torch.equal(u, v) for u, v in zip(a, b))
    c = pyr(x, timestep_embedding([700], 64, torch.float64))
    assert (a[1] - c[1]).abs().max() > 1e-6


def test_pyramid_gradients():
    pyr = randomize(GuidancePyramid((8, 8, 12), time_dim=16).double(), scale=0.3)
    x, emb = torch.rand(1, 3, 8, 8, dtype=torch.float64), randn(1, 16, seed=1)
    ws = [randn(1, 8, 8, 8, seed=2), randn(1, 8, 4, 4, seed=3), randn(1, 12, 2, 2, seed=4)]
    loss = lambda: sum((f * w).sum() for f, w in zip(pyr(x, emb), ws))  # noqa: E731
    assert grad_check(loss, pyr, probe_count=60) <= 1e-4


def test_time_weights_bias_only():
    mlp = TimeWeightMLP(4)
    zero_module(mlp)
    with torch.no_grad():
        mlp.fc2.bias.copy_(torch.arange(11, dtype=torch.float32))
    w = mlp(timestep_embedding([5, 800]))
    assert torch.equal(w.alpha1, torch.arange(4.0).expand(2, 4))
    assert torch.equal(w.beta1, torch.arange(4.0, 8.0).expand(2, 4))
    assert w.gamma1.tolist() == [8.0, 8.0] and w.gamma2.tolist() == [9.0, 9.0] and w.gamma3.tolist() == [10.0, 10.0]


def test_time_weights_deterministic_and_gradients():
    mlp = randomize(TimeWeightMLP(6, time_dim=16).double())
    emb = randn(2, 16)
    a, b = mlp(emb), mlp(emb)
    assert torch.equal(a.alpha1, b.alpha1) and torch.equal(a.gamma3, b.gamma3)
    w = randn(2, 15, seed=1)

    def loss():
        tw = mlp(emb)
        flat = torch.cat([tw.alpha1, tw.beta1, tw.gamma1[:, None], tw.gamma2[:, None], tw.gamma3[:, None]], 1)
        return (flat * w).sum()

    assert grad_check(loss, mlp, probe_count=40) <= 1e-4


def test_sft_trivial_cases():
    f = randn(2, 5, 3, 3)
    zero = torch.zeros(2, 5, dtype=torch.float64)
    assert torch.equal(sft_modulate(f, zero, zero), torch.zeros_like(f))
    assert torch.equal(sft_modulate(f, torch.ones_like(zero), zero), 1 + f)


def test_sft_matches_scalar_loop():
    f, a, b = randn(2, 3, 2, 4), randn(2, 3, seed=1), randn(2, 3, seed=2)
    out = sft_modulate(f, a, b)
    for n in range(2):
        for c in range(3):
            for i in range(2):
                for j in range(4):
                    expected = a[n, c].item() * (1 + f[n, c, i, j].item()) + b[n, c].item()
                    assert out[n, c, i, j].item() == pytest.approx(expected, abs=1e-15)


def test_sft_channel_mismatch():
    with pytest.raises(ValueError):
        sft_modulate(randn(1, 3, 2, 2), randn(1, 4), randn(1, 4))


def _set_time_bias(block, c, g1, g2, g3):
    with torch.no_grad():
        block.weights.fc2.weight.zero_()
        bias = block.weights.fc2.bias
        bias.zero_()
        bias[:c] = 1.0
        bias[2 * c:] = torch.tensor([g1, g2, g3], dtype=bias.dtype)


def test_tafb_identity_case_bit_exact():
    block = randomize(TAFB(8).double())
    zero_module(block.fuse)
    zero_module(block.ffn)
    _set_time_bias(block, 8, 1.0, 0.0, 1.0)
    f_in, f_3d = randn(2, 8, 4, 4), randn(2, 8, 4, 4, seed=1)
    assert torch.equal(block(f_in, f_3d, randn(2, 64, seed=2)), f_in)


def test_tafb_zero_case():
    block = randomize(TAFB(8).double())
    zero_module(block.fuse)
    zero_module(block.ffn)
    _set_time_bias(block, 8, 0.0, 0.0, 0.0)
    out = block(randn(1, 8, 4, 4), randn(1, 8, 4, 4, seed=1), randn(1, 64, seed=2))
    assert torch.equal(out, torch.zeros_like(out))


def test_tafb_init_passes_features_through():
    block = TAFB(16).double()
    init_weights(block, seed=0)
    block.zero_init()
    f_in = randn(1, 16, 4, 4)
    out = block(f_in, randn(1, 16, 4, 4, seed=1), randn(1, 64, seed=2))
    # Only the small random fc2 weights of the time MLP perturb the identity.
    assert (out - f_in).abs().max() < 0.5


def test_tafb_matches_written_equations():
    block = randomize(TAFB(6, time_dim=8).double())
    f_in, f_3d, emb = randn(1, 6, 3, 3), randn(1, 6, 3, 3, seed=1), randn(1, 8, seed=2)
    w = block.weights(emb)
    f1 = w.alpha1[..., None, None] * (1 + layernorm2d(f_3d)) + w.beta1[..., None, None]
    f3 = block.cs1(f1) * f1
    f4 = block.cs2(f1) * layernorm2d(f_in)
    f5 = block.fuse(torch.cat([f3, f4], 1)) + w.gamma1 * f_in + w.gamma2 * f_3d
    expected = block.ffn(f5) + w.gamma3 * f5
    torch.testing.assert_close(block(f_in, f_3d, emb), expected, rtol=0, atol=1e-14)


def test_tafb_gradients():
    block = randomize(TAFB(8, time_dim=16).double(), scale=0.3)
    f_in, f_3d, emb = randn(2, 8, 4, 4), randn(2, 8, 4, 4, seed=1), randn(2, 16, seed=2)
    w = randn(2, 8, 4, 4, seed=3)
    assert grad_check(lambda: (block(f_in, f_3d, emb) * w).sum(), block, probe_count=80) <= 1e-4


def test_tafb_input_gradients():
    block = randomize(TAFB(4, time_dim=8).double(), scale=0.3)
    f_in = torch.nn.Parameter(randn(1, 4, 3, 3))
    f_3d = torch.nn.Parameter(randn(1, 4, 3, 3, seed=1))
    emb = randn(1, 8, seed=2)
    assert grad_check(lambda: block(f_in, f_3d, emb).square().sum(), [f_in, f_3d], probe_count=30) <= 1e-4


def test_tafb_shape_checks_and_time_dependence():
    block = randomize(TAFB(8).double(), scale=0.2)
    f = randn(1, 8, 4, 4)
    with pytest.raises(ValueError):
        block(f, randn(1, 8, 2, 2), randn(1, 64))
    with pytest.raises(ValueError):
        block(randn(1, 4, 4, 4), randn(1, 4, 4, 4), randn(1, 64))
    a = block(f, f, timestep_embedding([3], 64, torch.float64))
    b = block(f, f, timestep_embedding([300], 64, torch.float64))
    assert a.shape == f.shape
    assert not torch.allclose(a, b)
