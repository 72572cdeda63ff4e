import numpy as np
import pytest
import torch

from facediff.denoiser import (
    Denoiser, DenoiserConfig, diffusion_loss, from_model_space, load_checkpoint, new_train_state,
    save_checkpoint, to_model_space, to_numpy, to_tensor, train_loop,
)
from facediff.nnblocks import flat_view, grad_check
from facediff.schedule import make_schedule

from helpers import randn, randomize

SMALL = DenoiserConfig(image_size=16, channels=(8, 16), time_dim=16)


def _data(n, size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, size, size, 3)), rng.uniform(0, 1, (n, size, size, 3))


def test_fresh_model_outputs_zero():
    model = Denoiser(DenoiserConfig(image_size=32))
    out = model(torch.randn(2, 3, 32, 32), torch.rand(2, 3, 32, 32), [5, 900])
    assert out.shape == (2, 3, 32, 32)
    assert torch.count_nonzero(out) == 0


def test_default_size_shape():
    model = Denoiser(DenoiserConfig())
    with torch.no_grad():
        out = model(torch.randn(1, 3, 64, 64), torch.rand(1, 3, 64, 64), 10)
    assert out.shape == (1, 3, 64, 64)


def test_same_seed_same_weights():
    a, b = Denoiser(SMALL), Denoiser(SMALL)
    assert torch.equal(flat_view(a), flat_view(b))
    c = Denoiser(DenoiserConfig(16, (8, 16), time_dim=16, seed=1))
    assert not torch.equal(flat_view(a), flat_view(c))


def test_full_model_gradients():
    model = randomize(Denoiser(SMALL).double(), scale=0.2)
    x, c = randn(1, 3, 16, 16), torch.rand(1, 3, 16, 16, dtype=torch.float64)
    w = randn(1, 3, 16, 16, seed=5)
    assert grad_check(lambda: (model(x, c, [40]) * w).sum(), model, probe_count=40) <= 1e-3


def test_init_loss_equals_noise_power():
    model = Denoiser(SMALL)
    x0, x3 = _data(4, 16)
    eps = torch.randn(4, 3, 16, 16)
    loss = diffusion_loss(model, to_tensor(x0), to_tensor(x3), [1, 10, 500, 1000], eps, make_schedule())
    assert loss.item() == pytest.approx(eps.square().mean().item(), rel=1e-6)


class _NoiseOracle:
    """Returns the exact injected noise by inverting the forward process."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def __call__(self, x_t, x_3d, t):
        ab = torch.tensor([self.sched.alpha_bar(int(s)) for s in t], dtype=x_t.dtype)[:, None, None, None]
        return (x_t - ab.sqrt() * self.x0) / (1 - ab).sqrt()


def test_loss_zero_for_oracle_prediction():
    s = make_schedule()
    x0 = randn(3, 3, 8, 8)
    eps = randn(3, 3, 8, 8, seed=1)
    loss = diffusion_loss(_NoiseOracle(x0, s), x0, x0, [2, 300, 999], eps, s)
    assert loss.item() <= 1e-20


def test_loss_rejects_bad_timestep():
    model = Denoiser(SMALL)
    x = torch.zeros(1, 3, 16, 16)
    with pytest.raises(ValueError):
        diffusion_loss(model, x, x, 0, x, make_schedule())


def test_loss_batch_permutation_invariant():
    model = randomize(Denoiser(SMALL).double(), scale=0.1)
    s = make_schedule()
    x0, x3 = randn(4, 3, 16, 16), torch.rand(4, 3, 16, 16, dtype=torch.float64)
    eps, t = randn(4, 3, 16, 16, seed=2), np.array([3, 70, 400, 999])
    perm = [2, 0, 3, 1]
    a = diffusion_loss(model, x0, x3, t, eps, s)
    b = diffusion_loss(model, x0[perm], x3[perm], t[perm], eps[perm], s)
    assert abs(a.item() - b.item()) <= 1e-12


def test_zero_steps_returns_initial_weights():
    x0, x3 = _data(2, 16)
    state = train_loop(x0, x3, SMALL, steps=0)
    assert torch.equal(flat_view(state.model), flat_view(Denoiser(SMALL)))
    assert state.losses == [] and torch.equal(state.ema, flat_view(state.model))


def test_ema_decay_one_keeps_initial():
    x0, x3 = _data(4, 16)
    state = new_train_state(SMALL, ema_decay=1.0)
    init = state.ema.clone()
    train_loop(x0, x3, SMALL, steps=3, state=state)
    assert (state.ema - init).abs().max() <= 1e-12
    assert not torch.equal(flat_view(state.model), init)


def test_ema_decay_zero_tracks_model():
    x0, x3 = _data(4, 16)
    state = new_train_state(SMALL, ema_decay=0.0)
    train_loop(x0, x3, SMALL, steps=2, state=state)
    assert (state.ema - flat_view(state.model)).abs().max() <= 1e-12


def test_training_bit_identical(tmp_path):
    x0, x3 = _data(4, 16)
    a = train_loop(x0, x3, SMALL, steps=4, seed=3, out_dir=tmp_path / "a")
    b = train_loop(x0, x3, SMALL, steps=4, seed=3, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a/ckpt_final.bin").read_bytes() == (tmp_path / "b/ckpt_final.bin").read_bytes()
    assert (tmp_path / "a/loss.csv").read_text() == (tmp_path / "b/loss.csv").read_text()


def test_checkpoint_round_trip_and_resume(tmp_path):
    x0, x3 = _data(4, 16)
    straight = train_loop(x0, x3, SMALL, steps=4, seed=1)
    first = train_loop(x0, x3, SMALL, steps=2, seed=1)
    save_checkpoint(tmp_path / "c.bin", first)
    loaded = load_checkpoint(tmp_path / "c.bin")
    assert loaded.step == 2 and loaded.model.config == SMALL
    assert torch.equal(flat_view(loaded.model), flat_view(first.model))
    assert torch.equal(loaded.ema, first.ema)
    # Same weights and optimizer state: one more step from both agrees exactly.
    g = torch.Generator().manual_seed(9)
    x = to_tensor(x0[:1])
    eps = torch.randn(1, 3, 16, 16, generator=g)
    for st in (first, loaded):
        loss = diffusion_loss(st.model, x, to_tensor(x3[:1]), 50, eps, make_schedule())
        st.optimizer.zero_grad()
        loss.backward()
        st.optimizer.step()
    assert torch.equal(flat_view(loaded.model), flat_view(first.model))
    assert len(straight.losses) == 4


def test_checkpoint_rejects_corruption(tmp_path):
    state = new_train_state(SMALL)
    save_checkpoint(tmp_path / "c.bin", state)
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.bin")


def test_dataset_validation():
    x0, x3 = _data(2, 16)
    with pytest.raises(ValueError):
        train_loop(x0[:, :8, :8], x3[:, :8, :8], SMALL, steps=1)
    with pytest.raises(ValueError):
        train_loop(x0, x3[:1], SMALL, steps=1)
    bad = x0.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        train_loop(bad, x3, SMALL, steps=1)


def test_image_space_helpers():
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    x = to_model_space(img)
    assert x.min() >= -1 and x.max() <= 1
    np.testing.assert_allclose(from_model_space(x), img, atol=1e-12)
    assert np.array_equal(from_model_space(np.array([-3.0, 3.0])), [0.0, 1.0])
    t = to_tensor(img[None])
    assert t.shape == (1, 3, 5, 7)
    np.testing.assert_allclose(to_numpy(t)[0], img, atol=1e-6)


def test_time_weights_listing():
    model = Denoiser(SMALL)
    with torch.no_grad():
        model(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16), 7)
    rows = model.time_weights()
    assert len(rows) == len(SMALL.channels)
    assert set(rows[0]) == {"alpha1_mean", "beta1_mean", "gamma1", "gamma2", "gamma3"}
