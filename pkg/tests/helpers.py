"""Independent oracles shared by the tests.

The reference renderer below loops over pixels and splats in plain Python,
sorts every pixel's list completely and never terminates early.  It shares
no code with the package's rasterizer beyond the model container.
"""
from __future__ import annotations

import math

import numpy as np

from fleetsplat.core import Camera, GaussianModel, look_at, random_quaternions

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_color(model: GaussianModel, i: int, cam_center) -> np.ndarray:
    """Degree 0/1 spherical-harmonic color written out term by term."""
    d = model.positions[i] - cam_center
    x, y, z = d / np.linalg.norm(d)
    c = SH_C0 * model.sh[i, 0]
    if model.sh.shape[1] >= 4:
        c = c - SH_C1 * y * model.sh[i, 1] + SH_C1 * z * model.sh[i, 2] - SH_C1 * x * model.sh[i, 3]
    return np.maximum(c + 0.5, 0.0)


def naive_render(model: GaussianModel, cam: Camera, background=(0.0, 0.0, 0.0), early_stop: bool = False):
    """Per-pixel loop: full depth sort, per-splat evaluation, optional termination."""
    assert model.sh.shape[1] <= 4
    Rwc = cam.pose[:3, :3]
    center = cam.pose[:3, 3]
    splats = []
    for i in range(len(model)):
        t = Rwc.T @ (model.positions[i] - center)
        if not (cam.near < t[2] < cam.far):
            continue
        J = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                      [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        R = quat_matrix(model.rotations[i])
        S = np.diag(np.exp(model.log_scales[i]))
        cov3 = R @ S @ S @ R.T
        cov2 = J @ Rwc.T @ cov3 @ Rwc @ J.T + 0.3 * np.eye(2)
        mean = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
        opacity = 1.0 / (1.0 + math.exp(-model.opacity_logits[i]))
        splats.append((t[2], i, mean, np.linalg.inv(cov2), opacity, naive_color(model, i, center)))
    splats.sort(key=lambda s: (s[0], s[1]))
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            T = 1.0
            c = np.zeros(3)
            d = 0.0
            for z, _, mean, conic, opacity, col in splats:
                delta = np.array([px, py], dtype=np.float64) - mean
                m = float(delta @ conic @ delta)
                if m > 9.0:
                    continue
                a = min(0.999, opacity * math.exp(-0.5 * m))
                if a < 1.0 / 255.0:
                    continue
                if early_stop and T * (1.0 - a) < 1e-4:
                    break
                w = a * T
                c += w * col
                d += w * z
                alpha[py, px] += w
                T *= 1.0 - a
            color[py, px] = c + T * np.asarray(background)
            depth[py, px] = d
    return color, depth, alpha


def grid_camera(size: int = 16, height: float = 5.0, fov_deg: float = 60.0) -> Camera:
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    pose = look_at([0.0, 0.0, height], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, pose, near=0.1, far=100.0)


def random_scene(rng: np.random.Generator, n: int = 8, size: int = 16, sh_degree: int = 1,
                 opacity_range=(0.05, 0.6), scale_range=(0.15, 0.6)) -> tuple[GaussianModel, Camera]:
    """A few anisotropic splats in front of an oblique camera, all on screen."""
    height = 5.0
    cam_pose = look_at([0.4, -0.3, height], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
    f = 0.5 * size / math.tan(math.radians(60.0) / 2)
    cam = Camera(f, f, (size - 1) / 2 + 0.3, (size - 1) / 2 - 0.2, size, size, cam_pose, near=0.1, far=100.0)
    pos = np.column_stack([rng.uniform(-1.2, 1.2, n), rng.uniform(-1.2, 1.2, n), rng.uniform(-1.0, 1.0, n)])
    k = (sh_degree + 1) ** 2
    sh = rng.normal(0.0, 0.4, (n, k, 3))
    sh[:, 0] = rng.uniform(-1.0, 1.0, (n, 3))
    op = rng.uniform(*opacity_range, n)
    model = GaussianModel(pos, random_quaternions(rng, n), np.log(rng.uniform(*scale_range, (n, 3))),
                          np.log(op / (1 - op)), sh)
    return model, cam


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|), only where the analytic value exceeds ``floor``."""
    a, b = np.asarray(a), np.asarray(b)
    sel = np.abs(a) > floor
    return np.abs(a[sel] - b[sel]) / np.maximum(np.abs(a[sel]), np.abs(b[sel]))


def margins(model: GaussianModel, cam: Camera) -> dict[str, float]:
    """Distance of a scene from every non-smooth point of the forward pass.

    Finite differences are only meaningful when no (splat, pixel) entry sits
    on the 3-sigma cutoff, the 1/255 floor or the 0.999 clamp, and no color
    channel sits on its clamp at zero.
    """
    Rwc = cam.pose[:3, :3]
    center = cam.pose[:3, 3]
    out = {"maha": np.inf, "alpha_min": np.inf, "alpha_max": np.inf, "color": np.inf, "T": 1.0}
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    logT = np.zeros(u.shape)
    for i in range(len(model)):
        t = Rwc.T @ (model.positions[i] - center)
        J = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                      [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        R = quat_matrix(model.rotations[i])
        S = np.diag(np.exp(model.log_scales[i]))
        conic = np.linalg.inv(J @ Rwc.T @ R @ S @ S @ R.T @ Rwc @ J.T + 0.3 * np.eye(2))
        mean = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
        dx, dy = u - mean[0], v - mean[1]
        m = conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
        a = (1 / (1 + math.exp(-model.opacity_logits[i]))) * np.exp(-0.5 * m)
        out["maha"] = min(out["maha"], float(np.abs(m - 9.0).min()))
        out["alpha_min"] = min(out["alpha_min"], float(np.abs(a[m <= 9] * 255 - 1).min(initial=np.inf)))
        out["alpha_max"] = min(out["alpha_max"], float(np.abs(a - 0.999).min()))
        used = (m <= 9) & (a >= 1 / 255)
        logT += np.where(used, np.log1p(-np.minimum(a, 0.999)), 0.0)
        d = model.positions[i] - center
        x, y, z = d / np.linalg.norm(d)
        raw = SH_C0 * model.sh[i, 0] + 0.5
        if model.sh.shape[1] >= 4:
            raw = raw - SH_C1 * y * model.sh[i, 1] + SH_C1 * z * model.sh[i, 2] - SH_C1 * x * model.sh[i, 3]
        out["color"] = min(out["color"], float(np.abs(raw).min()))
    out["T"] = float(np.exp(logT.min()))
    return out


def smooth_scene(seed: int, **kw) -> tuple[GaussianModel, Camera]:
    """First scene from ``seed`` onwards whose forward pass is smooth around its parameters."""
    for k in range(1000):
        model, cam = random_scene(np.random.default_rng([seed, k]), **kw)
        m = margins(model, cam)
        if m["maha"] > 0.02 and m["alpha_min"] > 0.01 and m["alpha_max"] > 1e-3 and m["color"] > 1e-3 \
                and m["T"] > 2e-4:
            return model, cam
    raise RuntimeError("no smooth scene found")
