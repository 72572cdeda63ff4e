"""Fast invariant checks runnable from an installed package (no pytest needed)."""

from __future__ import annotations

import numpy as np
import torch

from .degrade import sample_degradation, degrade_pipeline
from .metrics import FeatureStats, frechet_distance, psnr, ssim
from .morphable3d import N_COEFFS, render_mesh, shape_from_coeffs, split_coeffs, synth_prior_model
from .nnblocks import grad_check
from .schedule import make_schedule, q_sample, reverse_step
from .tafb import TAFB


def _schedule_products():
    s = make_schedule()
    direct = np.array([np.prod(s.alphas[:t]) for t in range(1, s.T + 1)])
    return np.abs(direct - s.alpha_bars[1:]).max() <= 1e-12


def _oracle_chain():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (8, 8, 3))
    eps = rng.normal(size=x0.shape)
    x = q_sample(x0, s.T, eps, s)
    for t in range(s.T, 0, -1):
        # Exact noise relative to the current iterate keeps the chain on the x0 track.
        e = (x - np.sqrt(s.alpha_bar(t)) * x0) / np.sqrt(1 - s.alpha_bar(t))
        x = reverse_step(x, e, t, None, s, sigma_mode="zero")
    return np.abs(x - x0).max() <= 1e-6


def _tafb_identity():
    torch.manual_seed(0)
    block = TAFB(8).double()
    block.zero_init()
    with torch.no_grad():
        block.weights.fc2.weight.zero_()
    f_in = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    f_3d = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    out = block(f_in, f_3d, torch.randn(2, 64, dtype=torch.float64))
    return torch.equal(out, f_in)


def _tafb_gradients():
    torch.manual_seed(1)
    block = TAFB(8).double()
    f_in = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    f_3d = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    emb = torch.randn(1, 64, dtype=torch.float64)
    w = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    return grad_check(lambda: (block(f_in, f_3d, emb) * w).sum(), block, probe_count=20) <= 1e-4


def _render_mean():
    m = synth_prior_model(0, 256)
    c = split_coeffs(np.zeros(N_COEFFS))
    r = render_mesh(m, c, 16, 16)
    # Zero lighting: the mean face is black on the mid-gray background.
    return (np.array_equal(shape_from_coeffs(m, c), m.mean_shape) and r.mask.any()
            and np.all(r.image[r.mask] == 0.0) and np.all(r.image[~r.mask] == 0.5))


def _degrade_determinism():
    y = np.random.default_rng(0).uniform(size=(32, 32, 3))
    p = sample_degradation(3)
    p = type(p)(p.sigma_blur, min(p.r_down, 8.0), p.delta_noise, p.q_jpeg)
    return np.array_equal(degrade_pipeline(y, p, 1), degrade_pipeline(y, p, 1))


def _metrics():
    a = np.random.default_rng(0).uniform(size=(16, 16, 3))
    s = FeatureStats(np.zeros(4), np.eye(4), 10)
    return (ssim(a, a) == 1.0 and abs(psnr(np.zeros(4), np.full(4, 0.1)) - 20.0) < 1e-9
            and frechet_distance(s, s) <= 1e-8)


CHECKS = {
    "schedule products": _schedule_products,
    "oracle reverse chain": _oracle_chain,
    "tafb identity": _tafb_identity,
    "tafb gradients": _tafb_gradients,
    "render zero coefficients": _render_mean,
    "degradation determinism": _degrade_determinism,
    "metrics closed forms": _metrics,
}


def run_selftest() -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            passed = bool(fn())
        except Exception as exc:  # noqa: BLE001
            print(f"FAIL {name}: {type(exc).__name__}: {exc}")
            ok = False
            continue
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= passed
    return ok
