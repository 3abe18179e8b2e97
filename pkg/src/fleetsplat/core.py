"""Scene representation shared by every stage of the pipeline.

A model is stored structure-of-arrays style (one numpy array per attribute),
which is what the rasterizer and optimizer want.  ``GaussianModel[i]`` gives
a single :class:`GaussianPrimitive` when per-splat access is convenient.

Conventions
-----------
* quaternions are ``(w, x, y, z)``
* scales are stored as logs, opacity as a logit
* ``Camera.pose`` is world-from-camera; the camera looks down its +z axis,
  +x right, +y down (pixel rows)
* the ground plane used for region partitioning is world XY
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# rotations


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    out = q / np.where(n > 0, n, 1.0)
    # zero quaternions degrade to identity instead of NaN
    bad = (n[..., 0] == 0)
    if np.any(bad):
        out[bad] = (1.0, 0.0, 0.0, 0.0)
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (already normalized) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    return normalize_quaternions(rng.normal(size=(n, 4)))


def covariance_from(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Covariance ``R S S^T R^T`` with ``S = diag(exp(log_scale))``.

    Works on a single primitive or batched over leading dimensions.
    """
    R = quat_to_rotmat(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 4x4 world-from-camera
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        if pose.shape == (3, 4):
            pose = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4 or 3x4, got {pose.shape}")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        R = pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("pose rotation block must be a proper rotation")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def rotation(self) -> np.ndarray:
        """World-from-camera rotation."""
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.center

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray per pixel with unit z, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """World points for a z-depth map, shape (H, W, 3)."""
        pts_cam = self.pixel_rays() * np.asarray(depth)[..., None]
        return self.camera_to_world(pts_cam)

    def same_as(self, other: "Camera") -> bool:
        return (self is other or (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near, self.far)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height, other.near, other.far)
            and np.array_equal(self.pose, other.pose)))

    def with_pose(self, pose: np.ndarray) -> "Camera":
        return replace(self, pose=pose)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` towards ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    min_x: float
    max_x: float
    min_y: float
    max_y: float
    device_id: int = 0

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(f"degenerate region {self}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        return point_in_region(points, self)

    def disjoint(self, other: "Region") -> bool:
        return (self.max_x <= other.min_x or other.max_x <= self.min_x
                or self.max_y <= other.min_y or other.max_y <= self.min_y)


def point_in_region(p: np.ndarray, r: Region):
    """Half-open ground-plane membership, ``min <= coord < max`` on x and y.

    Accepts a single 3-vector (returns bool) or an (N, 3) array (returns mask).
    """
    p = np.asarray(p, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    inside = (x >= r.min_x) & (x < r.max_x) & (y >= r.min_y) & (y < r.max_y)
    if p.ndim == 1:
        return bool(inside)
    return inside


# ---------------------------------------------------------------------------
# gaussians


class GaussianPrimitive(NamedTuple):
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((d+1)^2, 3)
    confidence: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.rotation, self.log_scale)


PARAM_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


@dataclass
class GaussianModel:
    """A set of 3D Gaussians plus densification bookkeeping."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray  # (N, (d+1)^2, 3)
    confidence: np.ndarray | None = None
    grad_accum: np.ndarray | None = field(default=None, repr=False)
    grad_count: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise ValueError(f"sh must be (N, coeffs, 3) with N={n}, got {sh.shape}")
        self.sh = sh
        deg = int(round(np.sqrt(self.sh.shape[1]))) - 1
        if sh_coeff_count(deg) != self.sh.shape[1] or not 0 <= deg <= 3:
            raise ValueError(f"bad SH coefficient count {self.sh.shape[1]}")
        if self.confidence is None:
            self.confidence = np.ones(n)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(n)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, sh_coeff_count(sh_degree), 3)))

    @classmethod
    def from_colors(cls, positions, colors, scales, opacities=0.5, rotations=None,
                    sh_degree: int = 1, confidence=None) -> "GaussianModel":
        """Convenience constructor from activated values (rgb in [0,1], linear scales)."""
        from .sh import rgb_to_sh_dc

        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
        sh[:, 0] = rgb_to_sh_dc(np.broadcast_to(colors, (n, 3)))
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        op = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        return cls(positions, normalize_quaternions(rotations), np.log(scales), logit(op), sh,
                   confidence)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i], self.rotations[i], self.log_scales[i],
                                 float(self.opacity_logits[i]), self.sh[i], float(self.confidence[i]))

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self[i] for i in range(len(self)))

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariance_from(normalize_quaternions(self.rotations), self.log_scales)

    def copy(self) -> "GaussianModel":
        return GaussianModel(self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh.copy(), self.confidence.copy(),
                             self.grad_accum.copy(), self.grad_count.copy())

    def subset(self, index) -> "GaussianModel":
        """New model with the selected primitives (boolean mask or index array), order kept."""
        return GaussianModel(self.positions[index], self.rotations[index], self.log_scales[index],
                             self.opacity_logits[index], self.sh[index], self.confidence[index],
                             self.grad_accum[index], self.grad_count[index])

    @staticmethod
    def concatenate(models: list["GaussianModel"]) -> "GaussianModel":
        models = list(models)
        if not models:
            raise ValueError("nothing to concatenate")
        degrees = {m.sh_degree for m in models}
        if len(degrees) != 1:
            raise ValueError(f"mixed SH degrees {sorted(degrees)}")
        cat = lambda name: np.concatenate([getattr(m, name) for m in models])  # noqa: E731
        return GaussianModel(cat("positions"), cat("rotations"), cat("log_scales"),
                             cat("opacity_logits"), cat("sh"), cat("confidence"),
                             cat("grad_accum"), cat("grad_count"))

    def reset_stats(self) -> None:
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def check(self) -> None:
        """Raise if any representation invariant is broken."""
        n = len(self)
        for name in PARAM_FIELDS + ("confidence", "grad_accum", "grad_count"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if n and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > 1e-6:
            raise ValueError("quaternions not normalized")
        if n and (np.any(~np.isfinite(self.scales)) or np.any(self.scales <= 0)):
            raise ValueError("scales must be finite and positive")
        if np.any(self.confidence < 0):
            raise ValueError("negative confidence")

    def equals(self, other: "GaussianModel") -> bool:
        """Bit-exact comparison of every parameter (bookkeeping ignored)."""
        if len(self) != len(other) or self.sh.shape != other.sh.shape:
            return False
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in PARAM_FIELDS + ("confidence",))
