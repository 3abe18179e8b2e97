"""End-to-end glue over a scene directory: partition, per-device work, fleet runs, evaluation."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import DistillConfig
from .core import Camera, GaussianModel, Region
from .data import layout
from .data.formats import load_model, save_model
from .data.synthetic import assign_cameras, partition_scene
from .dist.device import DeviceConfig, DeviceResult, run_device
from .dist.server import ServerConfig, ServerResult, run_server
from .dist.transport import LoopbackListener, SocketListener, connect_tcp
from .initialize import (FilePredictor, SyntheticPredictor, assemble_init, build_graph, global_align,
                         pair_global_scales, pair_images)
from .loss import psnr, ssim
from .raster import RenderOptions, render
from .train import DeviceDataset, TrainConfig, train_device, write_trace


def background(root) -> tuple:
    return tuple(layout.read_meta(root)["background"])


def synthetic_predictor(root, camera_ids: list[int], seed: int, noise_frac: float = 0.005) -> SyntheticPredictor:
    meta = layout.read_meta(root)
    cams = layout.read_cameras(root)
    return SyntheticPredictor([cams[i] for i in camera_ids], layout.read_images(root, camera_ids),
                              layout.read_depths(root, camera_ids, gt=True), layout.read_alphas(root, camera_ids),
                              seed=seed, noise=noise_frac * meta["params"].extent, normalize=True,
                              sh_degree=meta["params"].sh_degree)


def partition(root, M: int, noise_frac: float = 0.005) -> dict[int, list[int]]:
    """Write regions.txt and device folders (train views plus their pair predictions)."""
    cams = layout.read_cameras(root)
    held = set(layout.read_heldout(root))
    train_ids = [i for i in sorted(cams) if i not in held]
    regions = partition_scene([cams[i] for i in train_ids], M)
    local = assign_cameras([cams[i] for i in train_ids], regions)
    short = sorted(d for d, idx in local.items() if len(idx) < 2)
    if short:
        raise ValueError(f"devices {short} would receive fewer than 2 training views; "
                         f"use fewer devices or more cameras")
    layout.write_regions(root, regions)
    seed = layout.read_meta(root)["seed"]
    out = {}
    for dev, idx in local.items():
        ids = [train_ids[k] for k in idx]
        pred = synthetic_predictor(root, ids, seed=seed * 1000 + dev + 1, noise_frac=noise_frac)
        preds = [pred(p, q) for p, q in pair_images(len(ids), 1)]
        layout.write_device(root, dev, ids, preds)
        out[dev] = ids
    return out


def device_dataset(root, device_id: int) -> DeviceDataset:
    ids = layout.read_device_ids(root, device_id)
    if not ids:
        raise ValueError(f"device {device_id} has no training views")
    cams = layout.read_cameras(root)
    return DeviceDataset(layout.read_images(root, ids), [cams[i] for i in ids], layout.read_depths(root, ids), ids)


def init_device(root, device_id: int, stride: int = 2, align_steps: int = 500,
                scale_mode: str = "global+local") -> GaussianModel:
    ids = layout.read_device_ids(root, device_id)
    if len(ids) < 2:
        raise ValueError(f"device {device_id} has {len(ids)} views; pairing needs at least 2")
    cams = layout.read_cameras(root)
    cam_list = [cams[i] for i in ids]
    predictor = FilePredictor(layout.device_dir(root, device_id) / "pairs")
    graph = build_graph(pair_images(len(ids), stride), predictor, len(ids))
    al = global_align(graph, cam_list, steps=align_steps)
    sg = float(np.exp(np.mean(np.log(pair_global_scales(graph, al, cam_list)))))
    return assemble_init(graph, al, sg, scale_mode=scale_mode)


def train_config(root, steps: int = 10_000, densify_interval: int = 300, depth: bool = True,
                 shape_freeze: bool = True, seed: int = 0, max_gaussians: int | None = 20000) -> TrainConfig:
    from .loss import LossWeights
    from .train import DensifyThresholds
    return TrainConfig(steps=steps, densify_interval=densify_interval,
                       weights=LossWeights(depth=0.05 if depth else 0.0), shape_freeze=shape_freeze, seed=seed,
                       background=background(root), densify=DensifyThresholds(max_gaussians=max_gaussians))


def run_device_pipeline(root, device_id: int, cfg: TrainConfig, stride: int = 2, align_steps: int = 500,
                        write: bool = True) -> tuple[GaussianModel, list[Camera]]:
    """Initialize and train one device from its folder; optionally write its outputs."""
    model = init_device(root, device_id, stride, align_steps)
    ds = device_dataset(root, device_id)
    trained, trace = train_device(model, ds, cfg)
    if write:
        d = layout.device_dir(root, device_id)
        save_model(d / "init.dgs", model)
        save_model(d / "trained.dgs", trained)
        write_trace(d / "trace.tsv", trace)
    return trained, ds.cameras


def evaluate(model: GaussianModel, root, views: list[int] | None = None) -> list[dict]:
    """Per-view PSNR / SSIM against the stored images (held-out views by default)."""
    cams = layout.read_cameras(root)
    views = layout.read_heldout(root) if views is None else views
    opts = RenderOptions(background=background(root))
    rows = []
    for i in views:
        target = layout.read_images(root, [i])[0]
        # images are stored as float32; compare at that precision
        out = render(model, cams[i], opts).color.astype(np.float32).astype(np.float64)
        rows.append({"view": i, "psnr": psnr(target, out), "ssim": ssim(target, out, with_grad=False)[0]})
    return rows


def mean_psnr(rows: list[dict]) -> float:
    return float(np.mean([r["psnr"] for r in rows]))


@dataclass
class FleetResult:
    server: ServerResult
    devices: dict[int, DeviceResult]


def run_fleet(root, train_cfg: TrainConfig, distill: DistillConfig, transport: str = "loopback",
              stride: int = 2, align_steps: int = 500, timeout: float | None = None) -> FleetResult:
    """Server plus one thread per device over loopback or local TCP."""
    regions: list[Region] = layout.read_regions(root)
    listener = LoopbackListener() if transport == "loopback" else SocketListener("127.0.0.1:0")
    connect = listener.connect if transport == "loopback" else (lambda: connect_tcp(listener.address))
    results: dict[int, DeviceResult] = {}

    def device(dev: int):
        def work(region):
            return run_device_pipeline(root, dev, train_cfg, stride, align_steps)
        results[dev] = run_device(DeviceConfig(dev), connect, work)

    threads = [threading.Thread(target=device, args=(r.device_id,), daemon=True) for r in regions]
    for t in threads:
        t.start()
    try:
        server = run_server(ServerConfig(regions, distill, straggler_timeout=timeout), listener)
    finally:
        for t in threads:
            t.join(timeout=60)
        listener.close()
    return FleetResult(server, results)


def load_models(paths) -> list[GaussianModel]:
    return [load_model(Path(p)) for p in paths]
