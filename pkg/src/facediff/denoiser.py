"""Conditional noise-prediction U-Net, the training objective and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .guidance import GuidancePyramid
from .nnblocks import ResBlock, _groups, flat_view, init_weights, load_flat, timestep_embedding, zero_module
from .schedule import NoiseSchedule, make_schedule
from .tafb import TAFB

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FDIFFCKP"
CKPT_VERSION = 1


@dataclass
class DenoiserConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 128)
    res_blocks: int = 1
    time_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        step = 2 ** (len(self.channels) - 1)
        if self.image_size % step:
            raise ValueError(f"image_size {self.image_size} not divisible by {step}")
        if self.res_blocks < 1:
            raise ValueError("res_blocks must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Denoiser(nn.Module):
    """U-Net whose encoder levels fuse the matching guidance level through a TAFB.

    Tensors are NCHW; ``x_t`` lives in [-1, 1] model space, the render in [0, 1].
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        td = config.time_dim

        self.pyramid = GuidancePyramid(ch, 3, td)
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.fusion = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks):
                blocks.append(ResBlock(prev, c, td))
                prev = c
            self.enc.append(blocks)
            self.fusion.append(TAFB(c, td))
            if i < len(ch) - 1:
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(prev, prev, td)
        self.dec = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(ch))):
            blocks = nn.ModuleList()
            blocks.append(ResBlock(prev + ch[i], ch[i], td))
            for _ in range(config.res_blocks - 1):
                blocks.append(ResBlock(ch[i], ch[i], td))
            prev = ch[i]
            self.dec.append(blocks)
            if i > 0:
                self.ups.append(nn.Conv2d(prev, prev, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, 3, 3, padding=1)

        # Initialization order is part of the determinism contract.
        init_weights(self, config.seed)
        for block in self.fusion:
            block.zero_init()
        zero_module(self.conv_out)

    def embed(self, t, dtype=None) -> torch.Tensor:
        dtype = dtype or self.conv_in.weight.dtype
        return timestep_embedding(t, self.config.time_dim, dtype)

    def forward(self, x_t: torch.Tensor, x_3d: torch.Tensor, t) -> torch.Tensor:
        t_emb = self.embed(t)
        if t_emb.shape[0] == 1 and x_t.shape[0] > 1:
            t_emb = t_emb.expand(x_t.shape[0], -1)
        pyramid = self.pyramid(x_3d, t_emb)
        return self.predict_noise(x_t, pyramid, t_emb)

    def predict_noise(self, x_t: torch.Tensor, pyramid: Sequence[torch.Tensor],
                      t_emb: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if x_t.shape[1] != 3 or tuple(x_t.shape[-2:]) != (size, size):
            raise ValueError(f"expected (B, 3, {size}, {size}) input, got {tuple(x_t.shape)}")
        if len(pyramid) != len(self.config.channels):
            raise ValueError(f"pyramid has {len(pyramid)} levels, model has {len(self.config.channels)}")
        h = self.conv_in(x_t)
        skips = []
        for i, blocks in enumerate(self.enc):
            for block in blocks:
                h = block(h, t_emb)
            h = self.fusion[i](h, pyramid[i], t_emb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, t_emb)
        n = len(self.dec)
        for j, blocks in enumerate(self.dec):
            h = torch.cat([h, skips[n - 1 - j]], dim=1)
            for block in blocks:
                h = block(h, t_emb)
            if j < len(self.ups):
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def time_weights(self) -> list[dict[str, float]]:
        """Per-level TAFB weights from the most recent forward pass."""
        return [b.last_weights.summary() for b in self.fusion if b.last_weights is not None]


def to_model_space(img: np.ndarray) -> np.ndarray:
    """[0, 1] image (H, W, C) -> [-1, 1]."""
    return img * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def to_tensor(imgs, dtype=torch.float32) -> torch.Tensor:
    """Stack HWC numpy images into an NCHW tensor."""
    arr = np.asarray(imgs)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_numpy(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr


def diffusion_loss(model: Denoiser, x0: torch.Tensor, x_3d: torch.Tensor, t, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    ``t`` is an int or a length-B sequence of per-item timesteps.
    """
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (x0.shape[0],)).copy()
    ab = torch.tensor([sched.alpha_bar(int(s)) for s in t_arr], dtype=x0.dtype)
    if (t_arr < 1).any() or (t_arr > sched.T).any():
        raise ValueError(f"timesteps outside [1, {sched.T}]")
    x_t = ab.sqrt()[:, None, None, None] * x0 + (1 - ab).sqrt()[:, None, None, None] * eps
    pred = model(x_t, x_3d, t_arr)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        norm = flat_view(model).norm().item()
        raise FloatingPointError(f"non-finite loss at t={t_arr.tolist()}, param norm {norm:.4g}")
    return loss


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Adam
    ema: torch.Tensor
    step: int = 0
    losses: list[float] = field(default_factory=list)
    ema_decay: float = 0.999

    def ema_model(self) -> Denoiser:
        clone = Denoiser(self.model.config).to(self.ema.dtype)
        load_flat(clone, self.ema)
        return clone

    def update_ema(self) -> None:
        self.ema.mul_(self.ema_decay).add_(flat_view(self.model), alpha=1.0 - self.ema_decay)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    ema_decay: float = 0.999
    checkpoint_every: int = 500
    seed: int = 0


def new_train_state(config: DenoiserConfig, lr: float = 1e-4, ema_decay: float = 0.999) -> TrainState:
    model = Denoiser(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    return TrainState(model, opt, flat_view(model).clone(), ema_decay=ema_decay)


def train_loop(x0: np.ndarray, x_3d: np.ndarray, config: DenoiserConfig, steps: int, seed: int = 0,
               sched: NoiseSchedule | None = None, train: TrainConfig | None = None,
               state: TrainState | None = None, out_dir: str | Path | None = None) -> TrainState:
    """Adam on the noise-prediction loss with uniform timesteps.

    ``x0`` is (N, H, W, 3) in [-1, 1]; ``x_3d`` is (N, H, W, 3) in [0, 1].
    Checkpoints and the loss CSV go to ``out_dir`` when given.
    """
    train = train or TrainConfig(steps=steps, seed=seed)
    sched = sched or make_schedule()
    x0 = np.asarray(x0, dtype=np.float32)
    x_3d = np.asarray(x_3d, dtype=np.float32)
    size = config.image_size
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (N, H, W, 3) array")
    if x0.shape != x_3d.shape or x0.shape[1:] != (size, size, 3):
        raise ValueError(f"dataset shapes {x0.shape} / {x_3d.shape} do not match image size {size}")
    if not (np.isfinite(x0).all() and np.isfinite(x_3d).all()):
        raise ValueError("dataset contains non-finite values")

    if state is None:
        state = new_train_state(config, train.lr, train.ema_decay)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    data = to_tensor(x0)
    cond = to_tensor(x_3d)
    gen = torch.Generator().manual_seed(seed)
    model = state.model
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (train.batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (train.batch_size,), generator=gen)
        eps = torch.randn((train.batch_size, 3, size, size), generator=gen)
        loss = diffusion_loss(model, data[idx], cond[idx], t.numpy(), eps, sched)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.update_ema()
        state.step += 1
        state.losses.append(loss.item())
        if out_dir is not None and train.checkpoint_every and state.step % train.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"ckpt_{state.step:07d}.bin", state)
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, loss.item())
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(out / "ckpt_final.bin", state)
        write_loss_csv(out / "loss.csv", state.losses)
    return state


def write_loss_csv(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def _adam_moments(state: TrainState) -> tuple[np.ndarray, np.ndarray, int]:
    m, v, steps = [], [], 0
    for p in state.model.parameters():
        st = state.optimizer.state.get(p, {})
        if st:
            m.append(st["exp_avg"].reshape(-1))
            v.append(st["exp_avg_sq"].reshape(-1))
            steps = int(st["step"])
        else:
            m.append(torch.zeros(p.numel()))
            v.append(torch.zeros(p.numel()))
    as_np = lambda xs: torch.cat(xs).detach().numpy().astype("<f4")  # noqa: E731
    return as_np(m), as_np(v), steps


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    """Header, config JSON, then float32 params, EMA and Adam moments (little-endian)."""
    cfg = json.dumps(asdict(state.model.config), sort_keys=True).encode()
    params = flat_view(state.model).numpy().astype("<f4")
    ema = state.ema.numpy().astype("<f4")
    m, v, adam_steps = _adam_moments(state)
    header = struct.pack("<8sI64sQQI", CKPT_MAGIC, CKPT_VERSION,
                         state.model.config.digest().encode(), state.step, params.size, len(cfg))
    with open(path, "wb") as f:
        f.write(header)
        f.write(cfg)
        f.write(struct.pack("<Qd", adam_steps, state.ema_decay))
        for arr in (params, ema, m, v):
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path, lr: float = 1e-4) -> TrainState:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<8sI64sQQI")
    magic, version, digest, step, n, cfg_len = struct.unpack("<8sI64sQQI", raw[:head])
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r}, version {version})")
    off = head
    cfg_dict = json.loads(raw[off:off + cfg_len])
    off += cfg_len
    config = DenoiserConfig(**cfg_dict)
    if config.digest() != digest.decode():
        raise ValueError(f"{path}: config digest mismatch")
    adam_steps, ema_decay = struct.unpack("<Qd", raw[off:off + 16])
    off += 16
    arrays = []
    for _ in range(4):
        arrays.append(torch.from_numpy(np.frombuffer(raw, "<f4", n, off).astype(np.float32)))
        off += 4 * n
    params, ema, m, v = arrays
    state = new_train_state(config, lr, ema_decay)
    load_flat(state.model, params)
    state.ema = ema.clone()
    state.step = step
    if adam_steps:
        o = 0
        for p in state.model.parameters():
            k = p.numel()
            state.optimizer.state[p] = {
                "step": torch.tensor(float(adam_steps)),
                "exp_avg": m[o:o + k].view_as(p).clone(),
                "exp_avg_sq": v[o:o + k].view_as(p).clone(),
            }
            o += k
    return state
