"""Server-side aggregation: region filtering, union merge, teacher renders, distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianModel, Region, normalize_quaternions, point_in_region
from .loss import LossWeights, distill_loss
from .raster import RenderOptions, render, render_backward
from .train import DEFAULT_LR, Adam


def filter_by_region(model: GaussianModel, region: Region) -> GaussianModel:
    """Primitives whose position lies in ``region`` (half-open), order preserved."""
    if len(model) == 0:
        return model.copy()
    return model.subset(point_in_region(model.positions, region))


def merge(models: list[GaussianModel]) -> GaussianModel:
    """Union of device models, concatenated in the given (device id) order."""
    models = list(models)
    if not models:
        raise ValueError("nothing to merge")
    if len(models) == 1:
        return models[0].copy()
    return GaussianModel.concatenate(models)


def render_pseudo_gt(teacher: GaussianModel, cameras: list[Camera],
                     background=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """Teacher renders of its own training views, used as distillation targets."""
    opts = RenderOptions(background=background)
    return [render(teacher, cam, opts).color for cam in cameras]


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 5
    lr_scale: float = 0.1
    weights: LossWeights = LossWeights(depth=0.0)
    background: tuple = (0.0, 0.0, 0.0)
    scene_extent: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def learning_rates(self) -> dict[str, float]:
        lrs = {k: v * self.lr_scale for k, v in DEFAULT_LR.items()}
        lrs["positions"] *= self.scene_extent
        return lrs


def distill(student: GaussianModel, pseudo_views: list[np.ndarray], cameras: list[Camera],
            cfg: DistillConfig = DistillConfig()) -> tuple[GaussianModel, list[float]]:
    """Fine-tune the merged model on teacher views; no densification or pruning.

    One pass over all views per epoch in the given order.  Returns the
    student and the mean loss of each epoch.
    """
    if len(pseudo_views) != len(cameras):
        raise ValueError(f"{len(pseudo_views)} pseudo views for {len(cameras)} cameras")
    model = student.copy()
    if cfg.epochs == 0 or len(model) == 0:
        return model, []
    model.rotations = normalize_quaternions(model.rotations)
    opt = Adam(model)
    lrs = cfg.learning_rates()
    opts = RenderOptions(background=cfg.background)
    epoch_loss = []
    for _ in range(cfg.epochs):
        total = 0.0
        for view, cam in zip(pseudo_views, cameras):
            out = render(model, cam, opts)
            value, grad = distill_loss(view, out.color, cfg.weights)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite distillation loss")
            grads = render_backward(model, cam, grad, np.zeros(cam.shape), out.aux)
            opt.step(model, grads.as_dict(), lrs)
            total += value
        epoch_loss.append(total / len(cameras))
    return model, epoch_loss


@dataclass
class DeviceUpload:
    device_id: int
    model: GaussianModel
    cameras: list[Camera]


def aggregate(uploads: list[DeviceUpload], regions: dict[int, Region],
              cfg: DistillConfig = DistillConfig()) -> tuple[GaussianModel, list[float]]:
    """Filter every device model by its region, merge, and distill on teacher views."""
    uploads = sorted(uploads, key=lambda u: u.device_id)
    filtered = [filter_by_region(u.model, regions[u.device_id]) for u in uploads]
    merged = merge(filtered)
    views, cams = [], []
    for u in uploads:
        views += render_pseudo_gt(u.model, u.cameras, cfg.background)
        cams += list(u.cameras)
    return distill(merged, views, cams, cfg)
