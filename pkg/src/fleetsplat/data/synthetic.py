"""Synthetic aerial scenes: a terrain of Gaussians seen by a tilted camera grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import Camera, GaussianModel, Region, look_at, normalize_quaternions, point_in_region
from ..raster import RenderOptions, render
from ..sh import rgb_to_sh_dc

BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class SceneParams:
    n_gaussians: int = 1600
    n_cameras: int = 8
    extent: float = 1.0
    width: int = 32
    height: int = 32
    fov_deg: float = 60.0
    altitude: float = 0.4          # camera height, fraction of extent
    tilt_deg: float = 15.0         # forward pitch away from nadir
    rig_span: float = 0.45         # camera grid side, fraction of extent
    sh_degree: int = 1
    heldout_every: int = 4         # cameras k//2, k//2 + k, ... are held out (interior of the rig); 0 disables


@dataclass
class SyntheticScene:
    model: GaussianModel
    cameras: list[Camera]
    images: list[np.ndarray]
    depths: list[np.ndarray]       # alpha-normalized GT depth, far plane where empty
    alphas: list[np.ndarray]
    seed: int
    params: SceneParams
    heldout: list[int] = field(default_factory=list)

    @property
    def extent(self) -> float:
        return self.params.extent

    @property
    def background(self) -> tuple:
        return BACKGROUND

    @property
    def train_ids(self) -> list[int]:
        held = set(self.heldout)
        return [i for i in range(len(self.cameras)) if i not in held]


def _grid_shape(n: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    return rows, n // rows


def camera_rig(p: SceneParams) -> list[Camera]:
    """Snake-ordered grid of forward-tilted cameras, so consecutive ids overlap."""
    rows, cols = _grid_shape(p.n_cameras)
    E = p.extent
    span = p.rig_span * E
    xs = np.linspace(-span / 2, span / 2, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(-span / 2, span / 2, rows) if rows > 1 else np.zeros(1)
    f = 0.5 * p.width / np.tan(np.radians(p.fov_deg) / 2)
    h = p.altitude * E
    ahead = h * np.tan(np.radians(p.tilt_deg))
    cams = []
    for r, y in enumerate(ys):
        order = xs if r % 2 == 0 else xs[::-1]
        for x in order:
            pose = look_at([x, y, h], [x, y + ahead, 0.0], up=(0.0, 1.0, 0.0))
            cams.append(Camera(f, f, (p.width - 1) / 2, (p.height - 1) / 2, p.width, p.height, pose,
                               near=0.05 * E, far=5.0 * E))
    return cams


def _terrain_height(xy: np.ndarray, E: float, rng: np.random.Generator) -> np.ndarray:
    z = np.zeros(len(xy))
    for _ in range(4):
        c = rng.uniform(-E / 2, E / 2, 2)
        s = rng.uniform(0.08, 0.2) * E
        z += rng.uniform(0.02, 0.06) * E * np.exp(-np.sum((xy - c) ** 2, axis=1) / (2 * s * s))
    # a few flat-roofed blocks
    for _ in range(3):
        c = rng.uniform(-0.35 * E, 0.35 * E, 2)
        half = rng.uniform(0.04, 0.08) * E
        inside = np.all(np.abs(xy - c) < half, axis=1)
        z[inside] += rng.uniform(0.06, 0.12) * E
    return z


def _color_field(xy: np.ndarray, E: float, rng: np.random.Generator) -> np.ndarray:
    rgb = np.full((len(xy), 3), 0.45)
    for _ in range(6):
        k = rng.normal(size=2) * (2 * np.pi / E) * rng.uniform(1.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15, 3)
        rgb += amp * np.sin(xy @ k + phase)[:, None]
    rgb += rng.normal(0, 0.06, rgb.shape)
    return np.clip(rgb, 0.02, 0.98)


def terrain_model(n: int, extent: float, sh_degree: int, rng: np.random.Generator) -> GaussianModel:
    side = int(np.ceil(np.sqrt(n)))
    spacing = extent / side
    gx, gy = np.meshgrid((np.arange(side) + 0.5) * spacing - extent / 2,
                         (np.arange(side) + 0.5) * spacing - extent / 2)
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
    xy = xy + rng.uniform(-0.3, 0.3, xy.shape) * spacing
    z = _terrain_height(xy, extent, rng)
    pos = np.column_stack([xy, z])
    rgb = _color_field(xy, extent, rng)
    s_xy = np.clip(0.7 * spacing * rng.uniform(0.8, 1.2, (n, 2)), 0.005 * extent, 0.02 * extent)
    s_z = np.full((n, 1), 0.005 * extent)
    yaw = rng.uniform(0, np.pi, n)
    quat = normalize_quaternions(np.column_stack([np.cos(yaw / 2), np.zeros(n), np.zeros(n), np.sin(yaw / 2)]))
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0] = rgb_to_sh_dc(rgb)
    if k > 1:
        sh[:, 1:] = rng.normal(0, 0.03, (n, k - 1, 3))
    return GaussianModel(pos, quat, np.log(np.column_stack([s_xy, s_z])), np.full(n, 2.5), sh)


def _float32_exact(model: GaussianModel) -> GaussianModel:
    # the saved model then reproduces the stored renders bit for bit
    f = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return GaussianModel(f(model.positions), f(model.rotations), f(model.log_scales), f(model.opacity_logits),
                         f(model.sh), f(model.confidence))


def gt_depth(out, cam: Camera) -> np.ndarray:
    """Alpha-normalized depth clipped to the clip range; empty pixels sit on the far plane."""
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(out.alpha > 1e-6, out.depth / out.alpha, cam.far)
    return np.clip(d, cam.near, cam.far)


def synth_scene(seed: int, params: SceneParams | None = None, **overrides) -> SyntheticScene:
    p = params or SceneParams()
    if overrides:
        p = SceneParams(**{**p.__dict__, **overrides})
    if p.n_gaussians < 1 or p.n_cameras < 2:
        raise ValueError("need at least one Gaussian and two cameras")
    rng = np.random.default_rng(seed)
    model = _float32_exact(terrain_model(p.n_gaussians, p.extent, p.sh_degree, rng))
    cams = camera_rig(p)
    images, depths, alphas = [], [], []
    opts = RenderOptions(background=BACKGROUND)
    for cam in cams:
        out = render(model, cam, opts)
        images.append(out.color)
        depths.append(gt_depth(out, cam))
        alphas.append(out.alpha)
    heldout = [] if p.heldout_every <= 0 else list(range(p.heldout_every // 2, len(cams), p.heldout_every))
    return SyntheticScene(model, cams, images, depths, alphas, seed, p, heldout)


def estimated_depth(depth: np.ndarray, rng: np.random.Generator, noise: float = 0.02,
                    scale_range=(0.5, 2.0), offset_range=(-1.0, 1.0)) -> np.ndarray:
    """Stand-in for a monocular depth network: noisy GT under an unknown affine map."""
    a = rng.uniform(*scale_range)
    b = rng.uniform(*offset_range)
    noisy = depth * (1.0 + noise * rng.standard_normal(depth.shape))
    out = a * noisy + b
    return out - min(0.0, float(out.min())) + 1e-3


def partition_scene(cameras: list[Camera], M: int) -> list[Region]:
    """Split the cameras' ground footprint into an r x c grid of M regions.

    Interior cuts are placed on the bounding rectangle of camera centers;
    outer edges extend to infinity so every point of the world belongs to
    exactly one region.  Device ids run row-major from (min_x, min_y).
    """
    if M < 1:
        raise ValueError("need at least one region")
    xy = np.array([c.center[:2] for c in cameras])
    rows, cols = _grid_shape(M)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    # a rig that is a single row (or point) still needs distinct cuts
    pad = 0.5 * max(float(np.max(hi - lo)), 1e-3)
    flat = hi - lo < 1e-9
    lo, hi = np.where(flat, lo - pad, lo), np.where(flat, hi + pad, hi)
    xcuts = np.linspace(lo[0], hi[0], cols + 1)
    ycuts = np.linspace(lo[1], hi[1], rows + 1)
    xcuts[0], xcuts[-1] = -np.inf, np.inf
    ycuts[0], ycuts[-1] = -np.inf, np.inf
    regions = []
    for r in range(rows):
        for c in range(cols):
            regions.append(Region(xcuts[c], xcuts[c + 1], ycuts[r], ycuts[r + 1], device_id=len(regions)))
    return regions


def assign_cameras(cameras: list[Camera], regions: list[Region]) -> dict[int, list[int]]:
    """Camera ids per device id, in id order."""
    out = {r.device_id: [] for r in regions}
    for i, cam in enumerate(cameras):
        for r in regions:
            if point_in_region(cam.center, r):
                out[r.device_id].append(i)
                break
    return out
