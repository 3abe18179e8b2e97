"""Fixed-seed desk-scale benchmark and the two ablation suites.

Everything here is deterministic for a given :class:`BenchConfig`; the
tables are plain lists of dicts and can be written as tab-separated text.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import GaussianModel
from .data.synthetic import SceneParams, SyntheticScene, estimated_depth, synth_scene
from .initialize import (SCALE_MODES, SyntheticPredictor, assemble_init, build_graph, global_align,
                         pair_global_scales, pair_images, random_init)
from .loss import LossWeights, psnr, ssim
from .raster import RenderOptions, render
from .train import DensifyThresholds, DeviceDataset, TrainConfig, train_device


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 0
    scene: SceneParams = SceneParams()
    predictor_noise: float = 0.005     # fraction of scene extent
    stride: int = 2
    align_steps: int = 500
    train_steps: int = 1000
    densify_interval: int = 300
    max_gaussians: int = 20000
    depth_weight: float = 0.05
    random_init_points: int = 3000
    random_init_steps: int = 2000


@dataclass
class Benchmark:
    cfg: BenchConfig
    scene: SyntheticScene
    train_ids: list[int]
    heldout: list[int]
    dataset: DeviceDataset
    predictor: SyntheticPredictor
    _init_cache: dict = field(default_factory=dict, repr=False)

    @property
    def background(self):
        return self.scene.background

    @property
    def train_cameras(self):
        return [self.scene.cameras[i] for i in self.train_ids]


def make_benchmark(cfg: BenchConfig = BenchConfig()) -> Benchmark:
    sc = synth_scene(cfg.seed, cfg.scene)
    tr = sc.train_ids
    rng = np.random.default_rng([cfg.seed, 2])
    depths = [estimated_depth(sc.depths[i], rng) for i in tr]
    ds = DeviceDataset([sc.images[i] for i in tr], [sc.cameras[i] for i in tr], depths, tr)
    pred = SyntheticPredictor(ds.cameras, ds.images, [sc.depths[i] for i in tr], [sc.alphas[i] for i in tr],
                              seed=cfg.seed + 1, noise=cfg.predictor_noise * sc.extent, normalize=True,
                              sh_degree=cfg.scene.sh_degree)
    return Benchmark(cfg, sc, tr, list(sc.heldout), ds, pred)


def evaluate(model: GaussianModel, bench: Benchmark, views: list[int] | None = None) -> dict[str, float]:
    """Mean PSNR / SSIM over the held-out views (or ``views``)."""
    views = bench.heldout if views is None else views
    opts = RenderOptions(background=bench.background)
    ps, ss = [], []
    for i in views:
        out = render(model, bench.scene.cameras[i], opts).color
        ps.append(psnr(bench.scene.images[i], out))
        ss.append(ssim(bench.scene.images[i], out, with_grad=False)[0])
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def alignment(bench: Benchmark):
    """(graph, alignment, global scale) of the training views, computed once per benchmark."""
    if "align" not in bench._init_cache:
        cams = bench.train_cameras
        graph = build_graph(pair_images(len(cams), bench.cfg.stride), bench.predictor, len(cams))
        al = global_align(graph, cams, steps=bench.cfg.align_steps)
        sg = float(np.exp(np.mean(np.log(pair_global_scales(graph, al, cams)))))
        bench._init_cache["align"] = (graph, al, sg)
    return bench._init_cache["align"]


def init_model(bench: Benchmark, scale_mode: str = "global+local") -> GaussianModel:
    graph, al, sg = alignment(bench)
    return assemble_init(graph, al, sg, scale_mode=scale_mode)


def random_model(bench: Benchmark) -> GaussianModel:
    cams = bench.train_cameras
    height = float(np.mean([c.center[2] for c in cams]))
    rng = np.random.default_rng([bench.cfg.seed, 3])
    return random_init(cams, bench.cfg.random_init_points, rng, (0.5 * height, 2.0 * height),
                       sh_degree=bench.cfg.scene.sh_degree)


def train_config(bench: Benchmark, steps: int | None = None, depth: bool = True,
                 shape_freeze: bool = False) -> TrainConfig:
    c = bench.cfg
    return TrainConfig(steps=steps or c.train_steps, densify_interval=c.densify_interval,
                       weights=LossWeights(depth=c.depth_weight if depth else 0.0), shape_freeze=shape_freeze,
                       seed=c.seed, background=bench.background,
                       densify=DensifyThresholds(max_gaussians=c.max_gaussians))


def train_curve(model: GaussianModel, bench: Benchmark, cfg: TrainConfig, eval_every: int = 100):
    """Train and record held-out PSNR at step 0 and every ``eval_every`` steps."""
    curve = [(0, evaluate(model, bench)["psnr"])]

    def cb(step, m, _entry):
        if (step + 1) % eval_every == 0 or step + 1 == cfg.steps:
            curve.append((step + 1, evaluate(m, bench)["psnr"]))

    trained, trace = train_device(model, bench.dataset, cfg, callback=cb)
    return trained, trace, curve


def run_ablation_scale(bench: Benchmark) -> list[dict]:
    """Zero-step PSNR of the three covariance-scale variants."""
    rows = []
    for mode in SCALE_MODES:
        m = init_model(bench, mode)
        rows.append({"global_opt": mode != "none", "local_opt": mode == "global+local",
                     "psnr": evaluate(m, bench)["psnr"], "n_gaussians": len(m)})
    return rows


def run_ablation_depth(bench: Benchmark, steps: int | None = None) -> list[dict]:
    """Three runs differing only in the depth term and shape freezing."""
    rows = []
    base = init_model(bench)
    for depth, freeze in ((False, False), (True, False), (True, True)):
        cfg = train_config(bench, steps, depth=depth, shape_freeze=freeze)
        trained, _ = train_device(base, bench.dataset, cfg)
        rows.append({"depth_loss": depth, "shape_freeze": freeze, "psnr": evaluate(trained, bench)["psnr"],
                     "n_gaussians": len(trained)})
    return rows


def run_init_comparison(bench: Benchmark, init_steps: int | None = None, random_steps: int | None = None,
                        eval_every: int = 100) -> dict:
    """Held-out PSNR curves for predictor initialization vs. random initialization."""
    c = bench.cfg
    _, _, ours = train_curve(init_model(bench), bench, train_config(bench, init_steps or c.train_steps), eval_every)
    _, _, rand = train_curve(random_model(bench), bench, train_config(bench, random_steps or c.random_init_steps),
                             eval_every)
    return {"init": ours, "random": rand}


def format_tsv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    out = ["\t".join(cols)]
    for r in rows:
        out.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(out) + "\n"


def write_tsv(path, rows: list[dict]) -> None:
    Path(path).write_text(format_tsv(rows))


def quick_config(**kw) -> BenchConfig:
    """Smaller settings used by the test suite."""
    return replace(BenchConfig(), **kw)
