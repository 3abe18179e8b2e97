"""Software splatting rasterizer with an analytic backward pass.

Forward semantics, per pixel:

* splats are visited front to back by camera-space depth (ties by index)
* ``alpha_i = min(0.999, opacity_i * exp(-0.5 d^T cov2d^-1 d))``; splats
  outside the 3-sigma ellipse or with ``alpha_i < 1/255`` are skipped
* blending weight ``w_i = alpha_i * prod_{j<i} (1 - alpha_j)``; a splat that
  would push transmittance below 1e-4 ends the pixel and is not blended
* color is ``sum w_i c_i + T_final * background``, depth is the raw
  ``sum w_i d_i`` (not divided by accumulated alpha)

Instead of tiles, every (splat, pixel) overlap is enumerated and sorted by
(pixel, depth rank); the per-pixel front-to-back loop then becomes a
segmented cumulative sum of log transmittance.
Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import Camera, GaussianModel, covariance_from, normalize_quaternions, quat_to_rotmat
from .sh import sh_basis

COV2D_DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
SIGMA_CUTOFF = 3.0


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    expected_shape: tuple | None = None  # (H, W) the caller's buffers expect


class Projected2D(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    index: int


@dataclass
class Projection:
    """Projected splats that survived culling (structure of arrays)."""

    index: np.ndarray       # (n,) indices into the model
    mean2d: np.ndarray      # (n, 2) pixel coordinates
    cov2d: np.ndarray       # (n, 2, 2), dilated
    conic: np.ndarray       # (n, 2, 2), inverse of cov2d
    view_depth: np.ndarray  # (n,)
    p_cam: np.ndarray       # (n, 3)
    J: np.ndarray           # (n, 2, 3)
    cov3d: np.ndarray       # (n, 3, 3)
    radius: np.ndarray      # (n,) 3-sigma bounding radius in pixels

    def __len__(self):
        return len(self.index)

    def __getitem__(self, k) -> Projected2D:
        return Projected2D(self.mean2d[k], self.cov2d[k], float(self.view_depth[k]), int(self.index[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))


def _projection_jacobian(p_cam: np.ndarray, cam: Camera) -> np.ndarray:
    tx, ty, tz = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / tz ** 2
    return J


def project(model: GaussianModel, cam: Camera) -> Projection:
    """Project all primitives into ``cam`` and cull the ones that cannot contribute."""
    W = cam.rotation.T  # world -> camera
    p_cam = cam.world_to_camera(model.positions)
    z = p_cam[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    idx = np.flatnonzero(keep)
    p_cam = p_cam[idx]
    z = p_cam[:, 2]
    mean2d = np.stack([cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy], axis=1)
    cov3d = covariance_from(normalize_quaternions(model.rotations[idx]), model.log_scales[idx])
    J = _projection_jacobian(p_cam, cam)
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 1, 1] = a / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = SIGMA_CUTOFF * np.sqrt(lam_max)
    on_screen = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
                 & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1)
                 & np.isfinite(radius) & (det > 0))
    sel = np.flatnonzero(on_screen)
    return Projection(idx[sel], mean2d[sel], cov2d[sel], conic[sel], z[sel], p_cam[sel], J[sel],
                      cov3d[sel], radius[sel])


def splat_colors(model: GaussianModel, cam: Camera, index: np.ndarray):
    """View-dependent RGB per projected splat; returns (colors, raw, dirs, basis)."""
    v = model.positions[index] - cam.center
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    Y = sh_basis(dirs, model.sh_degree)
    raw = np.einsum("nk,nkc->nc", Y, model.sh[index]) + 0.5
    return np.maximum(raw, 0.0), raw, dirs, Y


@dataclass
class Aux:
    """Replay state recorded by :func:`render` for :func:`render_backward`."""

    n_model: int
    camera: Camera
    proj: Projection
    colors: np.ndarray
    raw_colors: np.ndarray
    dirs: np.ndarray
    pix: np.ndarray         # per blended entry, sorted by (pixel, depth rank)
    first: np.ndarray       # (P,) start of each pixel's run of entries
    splat: np.ndarray       # projected-splat id per entry
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray       # exp(-0.5 * mahalanobis^2) per entry
    clamped: np.ndarray     # alpha hit ALPHA_MAX
    alpha: np.ndarray       # per entry, after clamping
    T_before: np.ndarray    # per entry, transmittance in front of it
    T_final: np.ndarray     # (P,)
    background: np.ndarray
    model_fingerprint: tuple = field(default=())


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W)
    alpha: np.ndarray   # (H, W)
    aux: Aux


def _fingerprint(model: GaussianModel) -> tuple:
    return (len(model), model.sh.shape[1], float(np.sum(model.positions)) if len(model) else 0.0)


def _enumerate_overlaps(proj: Projection, width: int, height: int, order: np.ndarray | None = None):
    """All (splat, pixel) pairs inside each splat's clipped bounding box.

    Splats are visited in ``order`` (default: index order), so entries come
    out grouped by splat in that order.
    """
    order = np.arange(len(proj), dtype=np.int64) if order is None else order
    u, v, r = proj.mean2d[order, 0], proj.mean2d[order, 1], proj.radius[order]
    x0 = np.clip(np.ceil(u - r), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(u + r), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - r), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(v + r), 0, height - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    total = int(counts.sum())
    k = np.repeat(np.arange(len(order), dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    off = np.arange(total, dtype=np.int64) - starts[k]
    w = np.maximum(bw, 1)[k]
    px = x0[k] + off % w
    py = y0[k] + off // w
    return order[k], px, py


def _sort_by_pixel(pix: np.ndarray) -> np.ndarray:
    """Stable argsort by pixel id (radix sort when ids fit in 16 bits)."""
    if len(pix) and pix.max() < 2 ** 16:
        return np.argsort(pix.astype(np.uint16), kind="stable")
    return np.argsort(pix, kind="stable")


def _segment_starts(pix: np.ndarray, P: int) -> np.ndarray:
    """Start offset of every pixel's run in an array sorted by pixel."""
    counts = np.bincount(pix, minlength=P)
    return np.cumsum(counts) - counts


def _segmented_cumsum(x: np.ndarray, first: np.ndarray, pix: np.ndarray) -> np.ndarray:
    """Inclusive cumulative sum restarting at each pixel's run."""
    if len(x) == 0:
        return x.copy()
    cs = np.cumsum(x)
    base = cs[first[pix]] - x[first[pix]]
    return cs - base


def render(model: GaussianModel, cam: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    opts = opts or RenderOptions()
    if opts.expected_shape is not None and tuple(opts.expected_shape) != cam.shape:
        raise ContractError(f"camera is {cam.shape}, buffers expect {tuple(opts.expected_shape)}")
    H, Wd = cam.height, cam.width
    P = H * Wd
    bg = np.asarray(opts.background, dtype=np.float64).reshape(3)

    proj = project(model, cam)
    colors, raw, dirs, _ = splat_colors(model, cam, proj.index)

    # visiting splats front to back (stable, index order breaks ties) makes a
    # stable sort on pixel id yield (pixel, depth) order
    by_depth = np.argsort(proj.view_depth, kind="stable")
    splat, px, py = _enumerate_overlaps(proj, Wd, H, by_depth)
    mu_u, mu_v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    qa, qb, qc = proj.conic[:, 0, 0], proj.conic[:, 0, 1], proj.conic[:, 1, 1]
    dx = px - mu_u[splat]
    dy = py - mu_v[splat]
    maha = qa[splat] * dx * dx + 2 * qb[splat] * dx * dy + qc[splat] * dy * dy
    opac = model.opacities[proj.index]
    alpha_raw = opac[splat] * np.exp(-0.5 * maha)
    keep = np.flatnonzero((maha <= SIGMA_CUTOFF ** 2) & (alpha_raw >= ALPHA_MIN))
    pix = py[keep] * Wd + px[keep]
    sel = keep[_sort_by_pixel(pix)]
    splat, pix, dx, dy, maha = splat[sel], py[sel] * Wd + px[sel], dx[sel], dy[sel], maha[sel]
    gauss = np.exp(-0.5 * maha)
    alpha_raw = opac[splat] * gauss
    clamped = alpha_raw > ALPHA_MAX
    alpha_e = np.minimum(alpha_raw, ALPHA_MAX)

    # front-to-back transmittance as a segmented scan over each pixel's run
    first = _segment_starts(pix, P)
    T_after = np.exp(_segmented_cumsum(np.log1p(-alpha_e), first, pix))
    blended = T_after >= T_MIN  # a suffix of each run is dropped (early termination)
    splat, pix, dx, dy, gauss, clamped, alpha_e = (
        a[blended] for a in (splat, pix, dx, dy, gauss, clamped, alpha_e))
    first = _segment_starts(pix, P)
    log_keep = np.log1p(-alpha_e)
    T_incl = np.exp(_segmented_cumsum(log_keep, first, pix))
    T_before = T_incl / (1.0 - alpha_e)
    T_final = np.exp(np.bincount(pix, weights=log_keep, minlength=P))
    w_e = alpha_e * T_before

    color = np.stack([np.bincount(pix, weights=w_e * colors[splat, ch], minlength=P) for ch in range(3)],
                     axis=1) + T_final[:, None] * bg
    depth = np.bincount(pix, weights=w_e * proj.view_depth[splat], minlength=P)
    alpha_img = np.bincount(pix, weights=w_e, minlength=P)

    aux = Aux(len(model), cam, proj, colors, raw, dirs, pix, first, splat, dx, dy, gauss, clamped,
              alpha_e, T_before, T_final, bg, _fingerprint(model))
    return RenderOutput(color.reshape(H, Wd, 3), depth.reshape(H, Wd), alpha_img.reshape(H, Wd), aux)


# ---------------------------------------------------------------------------
# backward


@dataclass
class ParamGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray = None      # screen-space mean gradient, for densification stats
    visible: np.ndarray = None     # primitive was projected in this view

    @classmethod
    def zeros_like(cls, model: GaussianModel) -> "ParamGradients":
        n = len(model)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(model.sh), np.zeros((n, 2)), np.zeros(n, dtype=bool))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"positions": self.positions, "rotations": self.rotations, "log_scales": self.log_scales,
                "opacity_logits": self.opacity_logits, "sh": self.sh}

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        return ParamGradients(self.positions + other.positions, self.rotations + other.rotations,
                              self.log_scales + other.log_scales,
                              self.opacity_logits + other.opacity_logits, self.sh + other.sh,
                              self.mean2d + other.mean2d, self.visible | other.visible)


def freeze_shape(grads: ParamGradients) -> ParamGradients:
    """Zero the rotation and scale gradients; everything else passes through untouched."""
    return ParamGradients(grads.positions, np.zeros_like(grads.rotations), np.zeros_like(grads.log_scales),
                          grads.opacity_logits, grads.sh, grads.mean2d, grads.visible)


def _rotation_backward(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    qn = normalize_quaternions(q)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / norm


def render_backward(model: GaussianModel, cam: Camera, grad_color: np.ndarray, grad_depth: np.ndarray,
                    aux: Aux) -> ParamGradients:
    """Gradients of a scalar loss w.r.t. every model parameter.

    ``grad_color`` (H, W, 3) and ``grad_depth`` (H, W) are the upstream
    derivatives of the loss w.r.t. the rendered color and depth buffers.
    """
    if (aux.n_model != len(model) or not aux.camera.same_as(cam)
            or aux.model_fingerprint != _fingerprint(model)):
        raise ContractError("aux does not belong to this (model, camera) forward pass")
    H, Wd = cam.height, cam.width
    grad_color = np.asarray(grad_color, dtype=np.float64)
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    if grad_color.shape != (H, Wd, 3) or grad_depth.shape != (H, Wd):
        raise ContractError("upstream gradient shapes do not match the camera")
    P = H * Wd
    gC = grad_color.reshape(P, 3)
    gD = grad_depth.reshape(P)
    proj = aux.proj
    n = len(proj)
    out = ParamGradients.zeros_like(model)
    if n == 0:
        return out

    pix, splat = aux.pix, aux.splat
    a_e, Tb = aux.alpha, aux.T_before
    w_e = a_e * Tb

    # per-entry "value" seen by the loss: g_color . c + g_depth * d
    s_e = np.einsum("ec,ec->e", gC[pix], aux.colors[splat]) + gD[pix] * proj.view_depth[splat]
    ws = w_e * s_e
    behind = np.bincount(pix, weights=ws, minlength=P)[pix] - _segmented_cumsum(ws, aux.first, pix)
    bg_term = aux.T_final * (gC @ aux.background)
    g_alpha = Tb * s_e - (behind + bg_term[pix]) / (1.0 - a_e)
    g_alpha = np.where(aux.clamped, 0.0, g_alpha)

    # direct color / depth paths
    g_col = np.stack([np.bincount(splat, weights=w_e * gC[pix, ch], minlength=n) for ch in range(3)], axis=1)
    g_depth = np.bincount(splat, weights=w_e * gD[pix], minlength=n)

    # alpha = opacity * exp(-0.5 * maha)
    opac = model.opacities[proj.index]
    g_opac = np.bincount(splat, weights=g_alpha * aux.gauss, minlength=n)
    g_maha = g_alpha * (-0.5) * opac[splat] * aux.gauss
    q = proj.conic[splat]
    dx, dy = aux.dx, aux.dy
    g_u = np.bincount(splat, weights=g_maha * -2 * (q[:, 0, 0] * dx + q[:, 0, 1] * dy), minlength=n)
    g_v = np.bincount(splat, weights=g_maha * -2 * (q[:, 0, 1] * dx + q[:, 1, 1] * dy), minlength=n)
    gQ = np.zeros((n, 2, 2))
    gQ[:, 0, 0] = np.bincount(splat, weights=g_maha * dx * dx, minlength=n)
    gQ[:, 0, 1] = gQ[:, 1, 0] = np.bincount(splat, weights=g_maha * dx * dy, minlength=n)
    gQ[:, 1, 1] = np.bincount(splat, weights=g_maha * dy * dy, minlength=n)

    # conic = inverse(cov2d);  cov2d = J W cov3d W^T J^T + dilation
    Qm = proj.conic
    g_cov2d = -Qm @ gQ @ Qm
    Wm = cam.rotation.T
    M = Wm @ proj.cov3d @ Wm.T
    J = proj.J
    g_M = np.swapaxes(J, 1, 2) @ g_cov2d @ J
    g_J = 2.0 * g_cov2d @ J @ M
    g_cov3d = Wm.T @ g_M @ Wm

    # camera-space point: mean2d, Jacobian, depth
    t = proj.p_cam
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_u * fx / tz - g_J[:, 0, 2] * fx / tz ** 2
    g_t[:, 1] = g_v * fy / tz - g_J[:, 1, 2] * fy / tz ** 2
    g_t[:, 2] = (-g_u * fx * tx / tz ** 2 - g_v * fy * ty / tz ** 2 + g_depth
                 - g_J[:, 0, 0] * fx / tz ** 2 + g_J[:, 0, 2] * 2 * fx * tx / tz ** 3
                 - g_J[:, 1, 1] * fy / tz ** 2 + g_J[:, 1, 2] * 2 * fy * ty / tz ** 3)
    g_pos = g_t @ cam.rotation.T

    # view-dependent color
    idx = proj.index
    g_raw = g_col * (aux.raw_colors > 0)
    Y, dY = sh_basis(aux.dirs, model.sh_degree, with_grad=True)
    g_sh = Y[:, :, None] * g_raw[:, None, :]
    if model.sh_degree > 0:
        g_dir = np.einsum("nkd,nk->nd", dY, np.einsum("nkc,nc->nk", model.sh[idx], g_raw))
        v = model.positions[idx] - cam.center
        vn = np.linalg.norm(v, axis=1, keepdims=True)
        d = aux.dirs
        g_pos += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / vn

    # cov3d = (R s)(R s)^T
    R = quat_to_rotmat(normalize_quaternions(model.rotations[idx]))
    s = np.exp(model.log_scales[idx])
    Ms = R * s[:, None, :]
    g_Ms = (g_cov3d + np.swapaxes(g_cov3d, 1, 2)) @ Ms
    g_s = np.sum(R * g_Ms, axis=1)
    g_R = g_Ms * s[:, None, :]

    out.positions[idx] = g_pos
    out.rotations[idx] = _rotation_backward(model.rotations[idx], g_R)
    out.log_scales[idx] = g_s * s
    out.opacity_logits[idx] = g_opac * opac * (1.0 - opac)
    out.sh[idx] = g_sh
    out.mean2d[idx] = np.stack([g_u, g_v], axis=1)
    out.visible[idx] = True
    return out
