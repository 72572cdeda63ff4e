"""Linear 3D morphable face model, SH vertex shading and a z-buffer rasterizer.

Mesh space is right-handed with the face looking down +z. Rendering is
orthographic: x, y in [-1, 1] map onto the image plane, depth is -z so
nearer surfaces have smaller depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

# (name, width) in vector order; only the total and the 27 lighting terms are fixed
# by the method, the rest follows the usual D3DFR split.
PARTITION = (("alpha_id", 80), ("beta_exp", 64), ("delta_tex", 80), ("gamma_light", 27), ("pose", 6))
N_COEFFS = sum(w for _, w in PARTITION)

PRIOR_MAGIC = b"FDIFF3DMM\0\0\0"
PRIOR_VERSION = 1
BACKGROUND = 0.5

# Real spherical-harmonics normalization constants through band 2.
SH_C0 = 0.5 / np.sqrt(np.pi)
SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)
SH_C20 = 0.25 * np.sqrt(5.0 / np.pi)
SH_C22 = 0.25 * np.sqrt(15.0 / np.pi)


@dataclass(frozen=True)
class Coeff3DMM:
    alpha_id: np.ndarray
    beta_exp: np.ndarray
    delta_tex: np.ndarray
    gamma_light: np.ndarray
    pose: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def zeros(cls) -> "Coeff3DMM":
        return split_coeffs(np.zeros(N_COEFFS))


def split_coeffs(v) -> Coeff3DMM:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != N_COEFFS:
        raise ValueError(f"expected {N_COEFFS} coefficients, got {v.size}")
    if not np.isfinite(v).all():
        raise ValueError("coefficients must be finite")
    parts, off = {}, 0
    for name, width in PARTITION:
        parts[name] = v[off:off + width].copy()
        off += width
    return Coeff3DMM(**parts)


@dataclass(frozen=True)
class FacePriorModel:
    mean_shape: np.ndarray  # (V, 3)
    mean_texture: np.ndarray  # (V, 3) in [0, 1]
    B_id: np.ndarray  # (3V, 80), rows vertex-major x0 y0 z0 x1 ...
    B_exp: np.ndarray  # (3V, 64)
    B_tex: np.ndarray  # (3V, 80)
    triangles: np.ndarray  # (F, 3) int

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FacePriorModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class RenderedPrior:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W), +inf outside the mask


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _smooth_basis(points: np.ndarray, width: int, rng: np.random.Generator,
                  n_waves: int = 8, freq: float = 2.0) -> np.ndarray:
    """Orthonormal columns spanning random low-frequency displacement fields."""
    V = points.shape[0]
    cols = np.empty((3 * V, width))
    for k in range(width):
        field = np.empty((V, 3))
        for axis in range(3):
            omega = rng.normal(0.0, freq, size=(n_waves, 3))
            phase = rng.uniform(0.0, 2 * np.pi, size=n_waves)
            w = rng.normal(size=n_waves)
            field[:, axis] = np.cos(points @ omega.T + phase) @ w
        cols[:, k] = field.reshape(-1)
    q, r = np.linalg.qr(cols)
    return q * np.sign(np.diag(r))


def synth_prior_model(seed: int = 0, V: int = 1024,
                      radii: tuple[float, float, float] = (0.7, 0.9, 0.75)) -> FacePriorModel:
    """Deterministic ellipsoidal head with seeded smooth PCA-like bases."""
    if V < 16:
        raise ValueError(f"need at least 16 vertices, got {V}")
    unit = _fibonacci_sphere(V)
    hull = ConvexHull(unit)
    tris = hull.simplices.astype(np.int64)
    # Orient every face outward.
    a, b, c = unit[tris[:, 0]], unit[tris[:, 1]], unit[tris[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    mean_shape = unit * np.asarray(radii)
    rng = np.random.default_rng(seed)
    B_id = _smooth_basis(unit, 80, rng)
    B_exp = _smooth_basis(unit, 64, rng, freq=3.0)
    B_tex = _smooth_basis(unit, 80, rng)
    skin = np.array([0.80, 0.62, 0.52])
    shade = 0.85 + 0.15 * (unit[:, 1:2] + 1.0) / 2.0
    mean_texture = np.clip(skin * shade, 0.0, 1.0)
    return FacePriorModel(mean_shape, mean_texture, B_id, B_exp, B_tex, tris)


def _check_basis(model: FacePriorModel, basis: np.ndarray, coeffs: np.ndarray) -> None:
    if basis.shape != (3 * model.n_vertices, coeffs.size):
        raise ValueError(f"basis shape {basis.shape} incompatible with {coeffs.size} coefficients "
                         f"and {model.n_vertices} vertices")


def shape_from_coeffs(model: FacePriorModel, c: Coeff3DMM) -> np.ndarray:
    _check_basis(model, model.B_id, c.alpha_id)
    _check_basis(model, model.B_exp, c.beta_exp)
    offset = model.B_id @ c.alpha_id + model.B_exp @ c.beta_exp
    return model.mean_shape + offset.reshape(-1, 3)


def texture_from_coeffs(model: FacePriorModel, c: Coeff3DMM) -> np.ndarray:
    """Raw (unclamped) per-vertex albedo."""
    _check_basis(model, model.B_tex, c.delta_tex)
    return model.mean_texture + (model.B_tex @ c.delta_tex).reshape(-1, 3)


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Real SH basis through band 2 evaluated at unit normals, shape (V, 9)."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C20 * (3.0 * z * z - 1.0),
        SH_C2 * x * z, SH_C22 * (x * x - y * y),
    ], axis=1)


def sh_shade(texture: np.ndarray, normals: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Per-vertex color: albedo times the SH irradiance of its channel.

    ``gamma`` is channel-major: entries [9k, 9k + 9) light channel k.
    """
    normals = np.asarray(normals, dtype=np.float64)
    if not np.allclose(np.linalg.norm(normals, axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("normals must be unit length")
    g = np.asarray(gamma, dtype=np.float64).reshape(3, 9)
    return texture * (sh_basis(normals) @ g.T)


def euler_rotation(angles) -> np.ndarray:
    """R = Rz @ Ry @ Rx for angles (rx, ry, rz) in radians."""
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def vertex_normals(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals; isolated vertices get +z."""
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    fn = np.cross(b - a, c - a)  # length is twice the area
    vn = np.zeros_like(verts)
    for k in range(3):
        np.add.at(vn, tris[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    out = np.tile([0.0, 0.0, 1.0], (len(verts), 1))
    ok = norm[:, 0] > 1e-12
    out[ok] = vn[ok] / norm[ok]
    return out


def rasterize(xy: np.ndarray, depth: np.ndarray, colors: np.ndarray, tris: np.ndarray,
              H: int, W: int, background: float = BACKGROUND) -> RenderedPrior:
    """Z-buffer rasterization with barycentric interpolation at pixel centers.

    ``xy`` holds pixel coordinates (column, row). A pixel takes a triangle's
    sample only when its depth is strictly smaller than the buffer, so ties
    go to the lower triangle index.
    """
    image = np.full((H, W, 3), background, dtype=np.float64)
    zbuf = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=bool)
    for f, (i0, i1, i2) in enumerate(tris):
        p0, p1, p2 = xy[i0], xy[i1], xy[i2]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        c0 = max(int(np.floor(min(p0[0], p1[0], p2[0]) - 0.5)), 0)
        c1 = min(int(np.ceil(max(p0[0], p1[0], p2[0]) - 0.5)), W - 1)
        r0 = max(int(np.floor(min(p0[1], p1[1], p2[1]) - 0.5)), 0)
        r1 = min(int(np.ceil(max(p0[1], p1[1], p2[1]) - 0.5)), H - 1)
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
        w0 = ((p1[0] - px) * (p2[1] - py) - (p1[1] - py) * (p2[0] - px)) / area
        w1 = ((p2[0] - px) * (p0[1] - py) - (p2[1] - py) * (p0[0] - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        zb = zbuf[r0:r1 + 1, c0:c1 + 1]
        win = inside & (z < zb)
        if not win.any():
            continue
        zb[win] = z[win]
        col = (w0[..., None] * colors[i0] + w1[..., None] * colors[i1] + w2[..., None] * colors[i2])
        image[r0:r1 + 1, c0:c1 + 1][win] = col[win]
        mask[r0:r1 + 1, c0:c1 + 1][win] = True
    return RenderedPrior(image, mask, zbuf)


def render_mesh(model: FacePriorModel, c: Coeff3DMM, H: int = 64, W: int = 64) -> RenderedPrior:
    """Pose, shade and rasterize the face described by ``c``."""
    if H < 8 or W < 8:
        raise ValueError(f"render size must be at least 8x8, got {H}x{W}")
    shape = shape_from_coeffs(model, c)
    verts = shape @ euler_rotation(c.pose[:3]).T + c.pose[3:]
    normals = vertex_normals(verts, model.triangles)
    colors = np.clip(sh_shade(texture_from_coeffs(model, c), normals, c.gamma_light), 0.0, 1.0)
    xy = np.stack([(verts[:, 0] + 1.0) * 0.5 * W, (1.0 - verts[:, 1]) * 0.5 * H], axis=1)
    return rasterize(xy, -verts[:, 2], colors, model.triangles, H, W)


def default_lighting(ambient: float = 1.0) -> np.ndarray:
    """Gamma that yields plain albedo scaled by ``ambient`` plus a soft frontal key light."""
    g = np.zeros((3, 9))
    g[:, 0] = ambient / SH_C0 * 0.8
    g[:, 2] = 0.4 / SH_C1
    return g.reshape(-1)


def save_prior_model(path: str | Path, model: FacePriorModel) -> None:
    V, F = model.n_vertices, model.triangles.shape[0]
    dims = (V, F, model.B_id.shape[1], model.B_exp.shape[1], model.B_tex.shape[1])
    with open(path, "wb") as f:
        f.write(PRIOR_MAGIC + struct.pack("<I", PRIOR_VERSION))
        f.write(struct.pack("<5I", *dims))
        for arr in (model.mean_shape, model.mean_texture, model.B_id, model.B_exp, model.B_tex):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.triangles, dtype="<u4").tobytes())


def load_prior_model(path: str | Path) -> FacePriorModel:
    raw = Path(path).read_bytes()
    if raw[:12] != PRIOR_MAGIC:
        raise ValueError(f"{path}: not a prior model file")
    (version,) = struct.unpack("<I", raw[12:16])
    if version != PRIOR_VERSION:
        raise ValueError(f"{path}: unsupported prior model version {version}")
    V, F, n_id, n_exp, n_tex = struct.unpack("<5I", raw[16:36])
    off = 36

    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr

    mean_shape = take(3 * V, "<f4", (V, 3)).astype(np.float64)
    mean_tex = take(3 * V, "<f4", (V, 3)).astype(np.float64)
    B_id = take(3 * V * n_id, "<f4", (3 * V, n_id)).astype(np.float64)
    B_exp = take(3 * V * n_exp, "<f4", (3 * V, n_exp)).astype(np.float64)
    B_tex = take(3 * V * n_tex, "<f4", (3 * V, n_tex)).astype(np.float64)
    tris = take(3 * F, "<u4", (F, 3)).astype(np.int64)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    if tris.size and tris.max() >= V:
        raise ValueError(f"{path}: triangle index out of range")
    return FacePriorModel(mean_shape, mean_tex, B_id, B_exp, B_tex, tris)


def read_coeff_file(path: str | Path) -> dict[str, np.ndarray]:
    """Lines of ``stem v1 ... v257``; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stem, *vals = line.split()
        if len(vals) != N_COEFFS:
            raise ValueError(f"{path}:{lineno}: expected {N_COEFFS} values, got {len(vals)}")
        out[stem] = np.array([float(v) for v in vals])
    return out


def write_coeff_file(path: str | Path, coeffs: dict[str, np.ndarray]) -> None:
    with open(path, "w") as f:
        for stem in sorted(coeffs):
            vals = np.asarray(coeffs[stem], dtype=np.float64).reshape(-1)
            if vals.size != N_COEFFS:
                raise ValueError(f"{stem}: expected {N_COEFFS} values, got {vals.size}")
            f.write(stem + " " + " ".join(repr(float(v)) for v in vals) + "\n")


def random_coeffs(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Plausible coefficient vector: modest shape/texture offsets, frontal light, small pose."""
    v = np.zeros(N_COEFFS)
    v[0:80] = rng.normal(0, 0.25 * scale, 80)
    v[80:144] = rng.normal(0, 0.15 * scale, 64)
    v[144:224] = rng.normal(0, 0.2 * scale, 80)
    light = default_lighting(rng.uniform(0.8, 1.1)).reshape(3, 9)
    light[:, 1:4] += rng.normal(0, 0.3 * scale, 3)
    v[224:251] = light.reshape(-1)
    v[251:254] = rng.normal(0, 0.15 * scale, 3)
    v[254:256] = rng.normal(0, 0.05 * scale, 2)
    return v
