"""On-disk dataset layout.

::

    scene/
      scene.json              seed, scene parameters, background, held-out ids
      cameras.txt             one line per camera (see formats.write_cameras_txt)
      heldout.txt             held-out camera ids, one per line
      gt_model.dgs            ground-truth Gaussians
      images/0000.ppm         8-bit preview and lossless float copy (0000.pfm)
      depths/0000.pfm         estimated depth (noisy, unknown affine map)
      depths/gt_0000.pfm      ground-truth depth
      alphas/0000.pfm         ground-truth coverage
      regions.txt             device_id min_x max_x min_y max_y
      device_0/
        train.txt             camera ids of this device, in pairing order
        pairs/pair_0000_0001.dpp   pair predictions (indices local to train.txt)
        init.dgs  trained.dgs  trace.tsv
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..core import Camera, Region
from .formats import (FormatError, load_depth, load_model, load_pfm, read_cameras_txt, save_model,
                      save_pairpred, save_pfm, save_ppm, write_cameras_txt)
from .synthetic import SceneParams, SyntheticScene, estimated_depth


def image_path(root, cam_id: int, ext: str = "pfm") -> Path:
    return Path(root) / "images" / f"{cam_id:04d}.{ext}"


def depth_path(root, cam_id: int, gt: bool = False) -> Path:
    return Path(root) / "depths" / (f"gt_{cam_id:04d}.pfm" if gt else f"{cam_id:04d}.pfm")


def alpha_path(root, cam_id: int) -> Path:
    return Path(root) / "alphas" / f"{cam_id:04d}.pfm"


def device_dir(root, device_id: int) -> Path:
    return Path(root) / f"device_{device_id}"


def write_scene(root, scene: SyntheticScene, depth_seed: int | None = None) -> Path:
    """Write every file a device or the server may need for ``scene``."""
    root = Path(root)
    for sub in ("images", "depths", "alphas"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([scene.seed, 2] if depth_seed is None else depth_seed)
    for i, cam in enumerate(scene.cameras):
        save_ppm(image_path(root, i, "ppm"), scene.images[i])
        save_pfm(image_path(root, i), scene.images[i])
        save_pfm(depth_path(root, i, gt=True), scene.depths[i])
        save_pfm(depth_path(root, i), estimated_depth(scene.depths[i], rng))
        save_pfm(alpha_path(root, i), scene.alphas[i])
    write_cameras_txt(root / "cameras.txt", dict(enumerate(scene.cameras)))
    (root / "heldout.txt").write_text("".join(f"{i}\n" for i in scene.heldout))
    save_model(root / "gt_model.dgs", scene.model)
    meta = {"seed": scene.seed, "params": asdict(scene.params), "background": list(scene.background),
            "heldout": scene.heldout}
    (root / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


def read_meta(root) -> dict:
    path = Path(root) / "scene.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; is {root} a scene directory?")
    meta = json.loads(path.read_text())
    meta["params"] = SceneParams(**meta["params"])
    return meta


def read_cameras(root) -> dict[int, Camera]:
    return read_cameras_txt(Path(root) / "cameras.txt")


def read_heldout(root) -> list[int]:
    path = Path(root) / "heldout.txt"
    return [int(t) for t in path.read_text().split()] if path.exists() else []


def read_images(root, ids) -> list[np.ndarray]:
    return [load_pfm(image_path(root, i)).astype(np.float64) for i in ids]


def read_depths(root, ids, gt: bool = False) -> list[np.ndarray]:
    return [load_depth(depth_path(root, i, gt)).astype(np.float64) for i in ids]


def read_alphas(root, ids) -> list[np.ndarray]:
    return [load_pfm(alpha_path(root, i)).astype(np.float64) for i in ids]


def load_gt_model(root):
    return load_model(Path(root) / "gt_model.dgs")


# ---------------------------------------------------------------------------
# regions and devices


def write_regions(root, regions: list[Region]) -> None:
    lines = ["# device_id min_x max_x min_y max_y"]
    lines += [f"{r.device_id} {float(r.min_x)!r} {float(r.max_x)!r} {float(r.min_y)!r} {float(r.max_y)!r}" for r in regions]
    (Path(root) / "regions.txt").write_text("\n".join(lines) + "\n")


def read_regions(root) -> list[Region]:
    path = Path(root) / "regions.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the partition step first")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields")
        out.append(Region(float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]),
                          device_id=int(parts[0])))
    return out


def write_device(root, device_id: int, camera_ids: list[int], predictions=()) -> Path:
    d = device_dir(root, device_id)
    (d / "pairs").mkdir(parents=True, exist_ok=True)
    (d / "train.txt").write_text("".join(f"{i}\n" for i in camera_ids))
    for pred in predictions:
        p, q = pred.pair
        save_pairpred(d / "pairs" / f"pair_{p:04d}_{q:04d}.dpp", pred)
    return d


def read_device_ids(root, device_id: int) -> list[int]:
    path = device_dir(root, device_id) / "train.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the partition step first")
    return [int(t) for t in path.read_text().split()]
