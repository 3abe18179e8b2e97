"""Per-device optimization: render, loss, backward, Adam update, densify/prune."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianModel, PARAM_FIELDS, normalize_quaternions, quat_to_rotmat
from .loss import LossWeights, total_loss
from .raster import ParamGradients, RenderOptions, freeze_shape, render, render_backward

SHAPE_FIELDS = frozenset({"rotations", "log_scales"})

DEFAULT_LR = {
    "positions": 1.6e-4,       # times scene extent, decays to position_lr_final
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "sh": 2.5e-3,
}


@dataclass(frozen=True)
class DensifyThresholds:
    grad: float = 2e-4          # mean screen-space gradient (NDC units)
    split_extent: float = 0.01  # fraction of scene extent separating clone from split
    split_factor: float = 1.6
    min_opacity: float = 0.005
    max_gaussians: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    densify_interval: int = 300
    densify_stop_step: int | None = None     # defaults to steps // 2
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    position_lr_final: float = 1.6e-6
    shape_freeze: bool = False
    weights: LossWeights = LossWeights()
    seed: int = 0
    scene_extent: float | None = None        # estimated from the initial model when None
    densify: DensifyThresholds = DensifyThresholds()
    depth_mask_alpha: float = 0.5            # Pearson term only where rendered alpha reaches this
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        missing = set(PARAM_FIELDS) - set(self.lr)
        if missing:
            raise ValueError(f"learning rates missing for {sorted(missing)}")

    @property
    def stop_step(self) -> int:
        return self.steps // 2 if self.densify_stop_step is None else self.densify_stop_step

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class DeviceDataset:
    images: list[np.ndarray]
    cameras: list[Camera]
    depths: list[np.ndarray]          # estimated depth, arbitrary affine units
    ids: list[int] | None = None

    def __post_init__(self):
        if not (len(self.images) == len(self.cameras) == len(self.depths)):
            raise ValueError("images, cameras and depths must have equal counts")
        for k, (img, cam, dep) in enumerate(zip(self.images, self.cameras, self.depths)):
            if np.shape(img) != (cam.height, cam.width, 3):
                raise ValueError(f"image {k} has shape {np.shape(img)}, camera expects {cam.shape}")
            if np.shape(dep) != (cam.height, cam.width):
                raise ValueError(f"depth {k} has shape {np.shape(dep)}, camera expects {cam.shape}")
        if self.ids is None:
            self.ids = list(range(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)


class Adam:
    """Adam over the model's parameter classes, one learning rate per class."""

    def __init__(self, model: GaussianModel, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.t = 0

    def step(self, model: GaussianModel, grads: dict[str, np.ndarray], lrs: dict[str, float],
             frozen: frozenset = frozenset()) -> None:
        """One update; parameter classes in ``frozen`` are left bit-for-bit untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name in PARAM_FIELDS:
            if name in frozen:
                continue
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            upd = lrs[name] * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            setattr(model, name, getattr(model, name) - upd)
        if "rotations" not in frozen:
            model.rotations = normalize_quaternions(model.rotations)

    def remap(self, keep: np.ndarray, n_new: int) -> None:
        """Follow a densify/prune: keep the selected rows and append zeroed rows."""
        for state in (self.m, self.v):
            for name, arr in state.items():
                pad = np.zeros((n_new,) + arr.shape[1:])
                state[name] = np.concatenate([arr[keep], pad])


def estimate_extent(model: GaussianModel, cameras: list[Camera]) -> float:
    """Scene size used to scale position learning rate and the clone/split cut."""
    pts = model.positions if len(model) else np.array([c.center for c in cameras])
    center = np.median(pts, axis=0)
    r = np.percentile(np.linalg.norm(pts - center, axis=1), 90) if len(pts) > 1 else 0.0
    cam_r = max(np.linalg.norm(c.center - center) for c in cameras) if cameras else 0.0
    return float(1.1 * max(r, 0.5 * cam_r, 1e-6))


def densify_and_prune(model: GaussianModel, thr: DensifyThresholds, extent: float,
                      rng: np.random.Generator, optimizer: Adam | None = None) -> GaussianModel:
    """Clone small / split large high-gradient primitives, prune transparent ones.

    Returns a new model with bookkeeping reset; ``optimizer`` state follows.
    """
    n = len(model)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_grad = np.where(model.grad_count > 0, model.grad_accum / np.maximum(model.grad_count, 1), 0.0)
    hot = mean_grad > thr.grad
    if thr.max_gaussians is not None:
        room = max(0, thr.max_gaussians - n)
        if hot.sum() > room:
            order = np.argsort(-mean_grad, kind="stable")
            hot = np.zeros(n, dtype=bool)
            hot[order[:room]] = True
    big = np.max(model.scales, axis=1) > thr.split_extent * extent
    clone = hot & ~big
    split = hot & big

    # split: two samples from the parent's Gaussian, scales shrunk
    sp = model.subset(split)
    new_parts = [model.subset(clone)]
    if len(sp):
        R = quat_to_rotmat(normalize_quaternions(sp.rotations))
        children = []
        for _ in range(2):
            z = rng.standard_normal((len(sp), 3)) * sp.scales
            child = sp.copy()
            child.positions = sp.positions + np.einsum("nij,nj->ni", R, z)
            child.log_scales = sp.log_scales - np.log(thr.split_factor)
            children.append(child)
        new_parts += children
    grown = GaussianModel.concatenate([model.subset(~split)] + new_parts)
    keep_rows = np.concatenate([np.flatnonzero(~split)])
    n_added = len(grown) - len(keep_rows)

    alive = grown.opacities >= thr.min_opacity
    out = grown.subset(alive)
    if optimizer is not None:
        optimizer.remap(keep_rows, n_added)
        for state in (optimizer.m, optimizer.v):
            for name in state:
                state[name] = state[name][alive]
    out.reset_stats()
    return out


@dataclass
class TraceEntry:
    step: int
    view: int
    loss: float
    l1: float
    ssim: float
    depth: float
    n_gaussians: int


def _lr_at(cfg: TrainConfig, step: int, extent: float) -> dict[str, float]:
    lrs = dict(cfg.lr)
    lo = np.log(cfg.lr["positions"] * extent)
    hi = np.log(cfg.position_lr_final * extent)
    frac = step / max(cfg.steps - 1, 1)
    lrs["positions"] = float(np.exp(lo + (hi - lo) * frac))
    return lrs


def train_step(model: GaussianModel, ds: DeviceDataset, view: int, cfg: TrainConfig):
    """One forward/backward pass; returns (loss value, terms, gradients, render output)."""
    cam = ds.cameras[view]
    out = render(model, cam, RenderOptions(background=cfg.background))
    mask = out.alpha >= cfg.depth_mask_alpha
    value, g_img, g_depth, terms = total_loss(ds.images[view], out.color, out.depth, ds.depths[view],
                                              cfg.weights, depth_mask=mask)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at view {view} ({terms})")
    grads = render_backward(model, cam, g_img, g_depth, out.aux)
    if cfg.shape_freeze:
        grads = freeze_shape(grads)
    return value, terms, grads, out


def train_device(model: GaussianModel, ds: DeviceDataset, cfg: TrainConfig,
                 callback=None) -> tuple[GaussianModel, list[TraceEntry]]:
    """Optimize ``model`` on one device's views; the input model is not modified."""
    if len(ds) == 0:
        raise ValueError("device dataset is empty")
    model = model.copy()
    frozen = SHAPE_FIELDS if cfg.shape_freeze else frozenset()
    if not cfg.shape_freeze:
        model.rotations = normalize_quaternions(model.rotations)
    model.reset_stats()
    extent = cfg.scene_extent if cfg.scene_extent is not None else estimate_extent(model, ds.cameras)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model)
    trace: list[TraceEntry] = []
    for step in range(cfg.steps):
        view = step % len(ds)
        value, terms, grads, _ = train_step(model, ds, view, cfg)
        cam = ds.cameras[view]
        # densification statistic: screen-space gradient in NDC units
        ndc = grads.mean2d * np.array([cam.width / 2.0, cam.height / 2.0])
        vis = grads.visible
        model.grad_accum[vis] += np.linalg.norm(ndc[vis], axis=1)
        model.grad_count[vis] += 1
        opt.step(model, grads.as_dict(), _lr_at(cfg, step, extent), frozen)
        trace.append(TraceEntry(step, ds.ids[view], value, terms["l1"], terms["ssim"], terms["depth"], len(model)))
        if (step + 1) % cfg.densify_interval == 0 and step + 1 < cfg.stop_step:
            model = densify_and_prune(model, cfg.densify, extent, rng, opt)
        if callback is not None:
            callback(step, model, trace[-1])
    return model, trace


def write_trace(path, trace: list[TraceEntry]) -> None:
    from pathlib import Path
    cols = [f.name for f in dataclasses.fields(TraceEntry)]
    lines = ["\t".join(cols)]
    for e in trace:
        lines.append("\t".join(repr(getattr(e, c)) if isinstance(getattr(e, c), float) else str(getattr(e, c))
                               for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> list[TraceEntry]:
    from pathlib import Path
    rows = Path(path).read_text().splitlines()
    cols = rows[0].split("\t")
    types = {f.name: f.type for f in dataclasses.fields(TraceEntry)}
    out = []
    for row in rows[1:]:
        vals = row.split("\t")
        kw = {c: (int(v) if types[c] in ("int", int) else float(v)) for c, v in zip(cols, vals)}
        out.append(TraceEntry(**kw))
    return out


__all__ = ["TrainConfig", "DeviceDataset", "DensifyThresholds", "Adam", "TraceEntry", "train_device",
           "train_step", "densify_and_prune", "estimate_extent", "write_trace", "read_trace", "ParamGradients"]
