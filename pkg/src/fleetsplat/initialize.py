"""Gaussian initialization from pairwise pixel-aligned predictions.

Pipeline: pair images with a sliding window, run a pair predictor on every
edge of the connectivity graph, align all pointmaps in the world frame given
the camera poses, calibrate the covariance scales (a global ICP factor and
per-pixel neighbour spacing), and concatenate everything into one model.

Global alignment model
----------------------
Edge ``e = (p, q)`` predicts pointmaps for images p and q in camera p's frame,
up to an unknown scale ``sigma_e``.  With the poses known, the world-frame
prediction is ``R_p (sigma_e X) + c_p``.  The aligned pointmap of image v is
parameterized by per-pixel depth along v's camera rays, and the objective is
the confidence-weighted sum of Euclidean residuals.  Scales are split into a
global factor and relative factors whose product is pinned to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianModel, logit, normalize_quaternions
from .sh import rgb_to_sh_dc


class DisconnectedGraphError(ValueError):
    pass


@dataclass
class PairPrediction:
    """Output of a pair predictor for images (p, q), everything in camera p's frame.

    Index 0 of the stacked arrays is image p, index 1 is image q.  The raw
    Gaussian attributes hold ``K = 2 * H * W`` rows, image p's pixels first.
    """

    pair: tuple[int, int]
    pointmaps: np.ndarray       # (2, H, W, 3)
    confidence: np.ndarray      # (2, H, W)
    rotations: np.ndarray       # (K, 4)
    log_scales: np.ndarray      # (K, 3)
    opacity_logits: np.ndarray  # (K,)
    sh: np.ndarray              # (K, (d+1)^2, 3)
    true_scale: float | None = None  # oracle bookkeeping: metric = true_scale * predicted

    def __post_init__(self):
        self.pair = (int(self.pair[0]), int(self.pair[1]))
        self.pointmaps = np.asarray(self.pointmaps, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.pointmaps.ndim != 4 or self.pointmaps.shape[0] != 2 or self.pointmaps.shape[3] != 3:
            raise ValueError(f"pointmaps must be (2, H, W, 3), got {self.pointmaps.shape}")
        H, W = self.pointmaps.shape[1:3]
        K = 2 * H * W
        if self.confidence.shape != (2, H, W):
            raise ValueError("confidence shape does not match pointmaps")
        for name, shape in (("rotations", (K, 4)), ("log_scales", (K, 3)), ("opacity_logits", (K,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must be {shape}, got {arr.shape}")
            setattr(self, name, arr)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[0] != K or self.sh.shape[2] != 3:
            raise ValueError(f"sh must be (K, coeffs, 3), got {self.sh.shape}")
        if not np.all(np.isfinite(self.confidence)) or np.any(self.confidence < 0):
            raise ValueError("confidences must be finite and non-negative")

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.pointmaps.shape[1:3]

    def equals(self, other: "PairPrediction") -> bool:
        same = lambda a, b: np.array_equal(a, b)  # noqa: E731
        ts = (self.true_scale == other.true_scale) or (self.true_scale is None and other.true_scale is None)
        return (self.pair == other.pair and ts and same(self.pointmaps, other.pointmaps)
                and same(self.confidence, other.confidence) and same(self.rotations, other.rotations)
                and same(self.log_scales, other.log_scales)
                and same(self.opacity_logits, other.opacity_logits) and same(self.sh, other.sh))


class Predictor(Protocol):
    def __call__(self, p: int, q: int) -> PairPrediction: ...


class SyntheticPredictor:
    """Oracle predictor built from ground-truth depth.

    Back-projects GT depth of both images into image p's camera frame, adds
    metric Gaussian noise, and divides by a per-pair scale.  The scale is a
    jitter drawn log-uniformly from ``scale_range``, times the pair's mean
    depth when ``normalize`` is set (mimicking predictors that output
    unit-depth pointmaps).  Confidence falls with the drawn noise; pixels
    where the GT render is empty get zero confidence.

    Raw Gaussian scales are a single depth-unaware footprint in predictor
    units (``footprint_px`` pixels at the pair's median depth) plus mild
    anisotropy.
    """

    def __init__(self, cameras: list[Camera], images: list[np.ndarray], depths: list[np.ndarray],
                 alphas: list[np.ndarray] | None = None, *, seed: int = 0, noise: float = 0.0,
                 scale_range=(0.5, 2.0), normalize: bool = False, sh_degree: int = 1,
                 fixed_scales: dict | None = None, opacity: float = 0.8, footprint_px: float = 2.0):
        self.cameras = cameras
        self.images = images
        self.depths = depths
        self.alphas = alphas
        self.seed = seed
        self.noise = noise
        self.scale_range = scale_range
        self.normalize = normalize
        self.sh_degree = sh_degree
        self.fixed_scales = fixed_scales or {}
        self.opacity = opacity
        self.footprint_px = footprint_px

    def _rng(self, p: int, q: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, p, q])

    def __call__(self, p: int, q: int) -> PairPrediction:
        rng = self._rng(p, q)
        cam_p = self.cameras[p]
        pts, conf, cols = [], [], []
        for v in (p, q):
            world = self.cameras[v].backproject(self.depths[v])
            pts.append(cam_p.world_to_camera(world))
            cols.append(self.images[v])
            valid = np.ones(self.depths[v].shape, dtype=bool)
            if self.alphas is not None:
                valid = self.alphas[v] > 0.5
            conf.append(valid.astype(np.float64))
        pts = np.stack(pts)
        conf = np.stack(conf)
        if self.noise > 0:
            eps = rng.normal(0, self.noise, pts.shape)
            pts = pts + eps
            conf = conf / (1.0 + np.sum(eps ** 2, axis=-1) / (3 * self.noise ** 2))
        if (p, q) in self.fixed_scales:
            scale = float(self.fixed_scales[(p, q)])
        else:
            lo, hi = np.log(self.scale_range[0]), np.log(self.scale_range[1])
            scale = float(np.exp(rng.uniform(lo, hi)))
        if self.normalize:
            sel = conf > 0
            scale *= float(np.mean(pts[..., 2][sel])) if np.any(sel) else 1.0
        X = pts / scale
        H, W = X.shape[1:3]
        K = 2 * H * W
        z_med = np.median(X[..., 2][conf > 0]) if np.any(conf > 0) else 1.0
        footprint = self.footprint_px * z_med / cam_p.fx
        log_scales = np.log(footprint) + rng.normal(0, 0.1, (K, 3))
        rot = normalize_quaternions(np.tile([1.0, 0, 0, 0], (K, 1)) + rng.normal(0, 0.05, (K, 4)))
        nc = (self.sh_degree + 1) ** 2
        sh = np.zeros((K, nc, 3))
        sh[:, 0] = rgb_to_sh_dc(np.concatenate([c.reshape(-1, 3) for c in cols]))
        op = np.full(K, float(logit(self.opacity)))
        return PairPrediction((p, q), X, conf, rot, log_scales, op, sh, true_scale=scale)


class FilePredictor:
    """Serves predictions produced elsewhere, stored as pair-prediction files."""

    def __init__(self, directory):
        from pathlib import Path
        self.directory = Path(directory)

    def path_for(self, p: int, q: int):
        return self.directory / f"pair_{p:04d}_{q:04d}.dpp"

    def __call__(self, p: int, q: int) -> PairPrediction:
        from .data.formats import load_pairpred
        pred = load_pairpred(self.path_for(p, q))
        if pred.pair != (p, q):
            raise ValueError(f"{self.path_for(p, q)} holds pair {pred.pair}")
        return pred


# ---------------------------------------------------------------------------
# graph


def pair_images(n_images: int, stride: int = 1) -> list[tuple[int, int]]:
    """Sliding-window pairs ``(i, i+1)`` for ``i = 0, stride, 2*stride, ...`` (0-based)."""
    if n_images < 2:
        raise ValueError("need at least two images to form a pair")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [(i, i + 1) for i in range(0, n_images - 1, stride)]


@dataclass
class ConnectivityGraph:
    n_vertices: int
    edges: list[tuple[int, int]]
    predictions: list[PairPrediction]
    bridged: list[tuple[int, int]] = field(default_factory=list)

    def components(self) -> list[set[int]]:
        parent = list(range(self.n_vertices))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for p, q in self.edges:
            parent[find(p)] = find(q)
        groups: dict[int, set[int]] = {}
        for v in range(self.n_vertices):
            groups.setdefault(find(v), set()).add(v)
        return list(groups.values())

    def is_connected(self) -> bool:
        return len(self.components()) == 1

    def vertices_in_edges(self) -> set[int]:
        return {v for e in self.edges for v in e}


def bridging_edges(n_vertices: int, pairs: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Consecutive pairs (i, i+1) that join otherwise disconnected components."""
    g = ConnectivityGraph(n_vertices, list(pairs), [])
    comp_of = {}
    for k, comp in enumerate(g.components()):
        for v in comp:
            comp_of[v] = k
    extra = []
    for i in range(n_vertices - 1):
        if comp_of[i] != comp_of[i + 1]:
            extra.append((i, i + 1))
            old, new = comp_of[i + 1], comp_of[i]
            comp_of = {v: (new if c == old else c) for v, c in comp_of.items()}
    return extra


def build_graph(pairs: list[tuple[int, int]], predictor: Predictor, n_images: int | None = None,
                bridge: bool = True) -> ConnectivityGraph:
    """Attach a prediction to every pair; bridge disconnected stretches with (i, i+1) edges."""
    pairs = [tuple(map(int, e)) for e in pairs]
    if not pairs:
        raise ValueError("no pairs to build a graph from")
    n = n_images if n_images is not None else max(max(e) for e in pairs) + 1
    extra = bridging_edges(n, pairs)
    if extra and not bridge:
        raise DisconnectedGraphError(
            f"pairs {pairs} leave the graph disconnected; use stride 1 or add bridging pairs {extra}")
    edges = sorted(pairs + extra)
    preds = [predictor(p, q) for p, q in edges]
    for pred in preds:
        if not (np.all(np.isfinite(pred.pointmaps)) and np.all(np.isfinite(pred.confidence))):
            raise ValueError(f"non-finite prediction for pair {pred.pair}")
    return ConnectivityGraph(n, edges, preds, extra)


# ---------------------------------------------------------------------------
# global alignment


@dataclass
class AlignmentResult:
    pointmaps: dict[int, np.ndarray]   # image index -> (H, W, 3) world points
    depths: dict[int, np.ndarray]      # image index -> (H, W) z-depth
    relative_scales: np.ndarray        # per edge, product one
    global_scale: float                # common factor; edge scale = global * relative
    history: list[tuple[int, float]]   # (step, objective) checkpoints
    initial_objective: float
    final_objective: float

    @property
    def edge_scales(self) -> np.ndarray:
        return self.global_scale * self.relative_scales


def _edge_world_points(pred: PairPrediction, ref: Camera) -> np.ndarray:
    """R_p X for both images of the pair, shape (2, H, W, 3) (no scale, no translation)."""
    return pred.pointmaps @ ref.rotation.T


def _initial_edge_scale(pred: PairPrediction, cams: list[Camera]) -> float:
    """Scale putting image q's predicted points on q's camera rays (least squares)."""
    p, q = pred.pair
    a = _edge_world_points(pred, cams[p])[1]
    b = cams[p].center - cams[q].center
    rays = cams[q].pixel_rays() @ cams[q].rotation.T
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    w = pred.confidence[1]
    pa = a - np.sum(a * rays, axis=-1, keepdims=True) * rays
    pb = b - np.sum(b * rays, axis=-1, keepdims=True) * rays
    num = -np.sum(w * np.sum(pa * pb, axis=-1))
    den = np.sum(w * np.sum(pa * pa, axis=-1))
    if den <= 0 or num <= 0 or not np.isfinite(num / den):
        return 1.0
    return float(num / den)


def alignment_objective(graph: ConnectivityGraph, cams: list[Camera], depths: dict[int, np.ndarray],
                        log_scales: np.ndarray, smooth: float = 0.0, with_grad: bool = False):
    """Confidence-weighted sum of residual norms (normalized by total confidence)."""
    total_w = sum(float(pr.confidence.sum()) for pr in graph.predictions)
    total_w = total_w if total_w > 0 else 1.0
    val = 0.0
    g_depth = {v: np.zeros_like(d) for v, d in depths.items()} if with_grad else None
    g_logs = np.zeros(len(graph.edges))
    rays = {v: cams[v].pixel_rays() @ cams[v].rotation.T for v in depths}
    chi = {v: cams[v].center + rays[v] * depths[v][..., None] for v in depths}
    for k, pred in enumerate(graph.predictions):
        p, _ = pred.pair
        sigma = np.exp(log_scales[k])
        A = _edge_world_points(pred, cams[p])
        for slot, v in enumerate(pred.pair):
            y = sigma * A[slot] + cams[p].center
            r = chi[v] - y
            nr = np.sqrt(np.sum(r * r, axis=-1) + smooth ** 2)
            C = pred.confidence[slot] / total_w
            val += float(np.sum(C * nr))
            if with_grad:
                u = r / nr[..., None] * C[..., None]
                g_depth[v] += np.sum(u * rays[v], axis=-1)
                g_logs[k] -= sigma * float(np.sum(u * A[slot]))
    if with_grad:
        return val, g_depth, g_logs
    return val


def _cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + np.cos(np.pi * step / (total - 1)))


def global_align(graph: ConnectivityGraph, cameras: list[Camera], steps: int = 500, lr_max: float = 1e-2,
                 lr_min: float = 1e-4, checkpoint_every: int = 50,
                 callback: Callable[[int, float, np.ndarray], None] | None = None) -> AlignmentResult:
    """Jointly align every image's pointmap and every edge scale.

    Optimizes log-depth per pixel, a global log-scale and zero-mean relative
    log-scales with Adam under a cosine learning-rate decay.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not graph.is_connected():
        raise DisconnectedGraphError("global alignment needs a connected graph")
    for pred in graph.predictions:
        if not (np.all(np.isfinite(pred.pointmaps)) and np.all(np.isfinite(pred.confidence))):
            raise ValueError(f"non-finite prediction for pair {pred.pair}")
    cams = cameras
    E = len(graph.edges)

    init_scales = np.array([_initial_edge_scale(pr, cams) for pr in graph.predictions])
    log_s = np.log(init_scales)
    log_global = float(np.mean(log_s))
    log_rel = log_s - log_global

    # depth init: confidence-weighted mean z of the posed predictions
    num: dict[int, np.ndarray] = {}
    den: dict[int, np.ndarray] = {}
    for k, pred in enumerate(graph.predictions):
        p, _ = pred.pair
        A = _edge_world_points(pred, cams[p])
        for slot, v in enumerate(pred.pair):
            y = init_scales[k] * A[slot] + cams[p].center
            z = cams[v].world_to_camera(y)[..., 2]
            w = pred.confidence[slot] + 1e-12
            num[v] = num.get(v, 0.0) + w * z
            den[v] = den.get(v, 0.0) + w
    log_d = {}
    for v in num:
        z = num[v] / den[v]
        log_d[v] = np.log(np.clip(z, cams[v].near, cams[v].far))

    scale_ref = float(np.median([np.median(np.exp(d)) for d in log_d.values()]))
    smooth = 1e-6 * scale_ref

    def objective(with_grad):
        depths = {v: np.exp(d) for v, d in log_d.items()}
        return alignment_objective(graph, cams, depths, log_global + log_rel, smooth, with_grad), depths

    # Adam with step rejection: a step that raises the objective is undone and
    # the step size multiplier halved, so the objective never increases.
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    keys = sorted(log_d)
    m_d = {v: np.zeros_like(log_d[v]) for v in keys}
    v_d = {v: np.zeros_like(log_d[v]) for v in keys}
    m_s, v_s = np.zeros(E + 1), np.zeros(E + 1)
    backoff = 1.0

    (f, g_dep, g_logs), depths = objective(True)
    f0 = f
    history = [(0, f0)]
    for step in range(steps):
        lr = backoff * _cosine_lr(step, steps, lr_max, lr_min)
        t = step + 1
        saved = ({v: d.copy() for v, d in log_d.items()}, log_global, log_rel.copy())
        for v in keys:
            g = g_dep[v] * depths[v]
            m_d[v] = beta1 * m_d[v] + (1 - beta1) * g
            v_d[v] = beta2 * v_d[v] + (1 - beta2) * g * g
            log_d[v] -= lr * (m_d[v] / (1 - beta1 ** t)) / (np.sqrt(v_d[v] / (1 - beta2 ** t)) + eps)
        g_rel = g_logs - g_logs.mean()
        g_s = np.concatenate([[g_logs.sum()], g_rel])
        m_s = beta1 * m_s + (1 - beta1) * g_s
        v_s = beta2 * v_s + (1 - beta2) * g_s * g_s
        upd = lr * (m_s / (1 - beta1 ** t)) / (np.sqrt(v_s / (1 - beta2 ** t)) + eps)
        log_global -= upd[0]
        log_rel = log_rel - upd[1:]
        log_rel -= log_rel.mean()
        (f_new, g_new, gl_new), d_new = objective(True)
        if f_new <= f:
            f, g_dep, g_logs, depths = f_new, g_new, gl_new, d_new
        else:
            log_d, log_global, log_rel = saved
            backoff *= 0.5
        if callback is not None:
            callback(step, f, np.exp(log_rel))
        if (step + 1) % checkpoint_every == 0 or step + 1 == steps:
            history.append((step + 1, f))

    f_final, depths = objective(False)
    pointmaps = {v: cams[v].backproject(depths[v]) for v in keys}
    return AlignmentResult(pointmaps, depths, np.exp(log_rel), float(np.exp(log_global)), history, f0, f_final)


# ---------------------------------------------------------------------------
# scale calibration


def icp_global_scale(source: np.ndarray, target: np.ndarray, max_iter: int = 50, tol: float = 1e-6) -> float:
    """Scale factor mapping ``source`` onto ``target`` (centroids aligned, rotation fixed).

    Nearest-neighbour correspondences are recomputed each iteration and the
    scale is the closed-form least-squares fit on the matched, centred pairs.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(tgt) < 3:
        raise ValueError("ICP needs at least 3 points in each set")
    s_c = src - src.mean(axis=0)
    ss = float(np.sum(s_c * s_c))
    if ss <= 1e-24 * max(1.0, float(np.sum(src * src))):
        raise ValueError("source points are degenerate (all coincident)")
    t_mean = tgt.mean(axis=0)
    t_c = tgt - t_mean
    scale = np.sqrt(float(np.sum(t_c * t_c)) / len(tgt) / (ss / len(src)))
    tree = cKDTree(tgt)
    for _ in range(max_iter):
        _, idx = tree.query(scale * s_c + t_mean)
        m = tgt[idx]
        m_c = m - m.mean(axis=0)
        new = float(np.sum(m_c * s_c)) / ss
        if new <= 0:
            break
        done = abs(new - scale) <= tol * abs(scale)
        scale = new
        if done:
            break
    return float(scale)


def local_scale(pointmap: np.ndarray, tau: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean distance to the 4-connected neighbours, and a mask dropping outliers.

    A pixel is dropped when its spacing exceeds ``tau`` times the median.
    """
    X = np.asarray(pointmap, dtype=np.float64)
    H, W = X.shape[:2]
    if H < 2 or W < 2:
        raise ValueError("pointmap must be at least 2x2")
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    dv = np.linalg.norm(X[1:] - X[:-1], axis=-1)
    dh = np.linalg.norm(X[:, 1:] - X[:, :-1], axis=-1)
    total[1:] += dv
    total[:-1] += dv
    count[1:] += 1
    count[:-1] += 1
    total[:, 1:] += dh
    total[:, :-1] += dh
    count[:, 1:] += 1
    count[:, :-1] += 1
    s = total / count
    keep = s <= tau * np.median(s)
    return s, keep


# ---------------------------------------------------------------------------
# assembly


SCALE_MODES = ("none", "global", "global+local")


@dataclass
class InitResult:
    model: GaussianModel
    graph: ConnectivityGraph
    alignment: AlignmentResult
    global_scale: float


def pair_global_scales(graph: ConnectivityGraph, alignment: AlignmentResult, cameras: list[Camera]) -> np.ndarray:
    """ICP scale per edge between raw predicted points and aligned points (camera-p frame)."""
    out = []
    for pred in graph.predictions:
        p, _ = pred.pair
        src, tgt = [], []
        for slot, v in enumerate(pred.pair):
            sel = pred.confidence[slot] > 0
            src.append(pred.pointmaps[slot][sel])
            tgt.append(cameras[p].world_to_camera(alignment.pointmaps[v][sel]))
        out.append(icp_global_scale(np.concatenate(src), np.concatenate(tgt)))
    return np.array(out)


def assemble_init(graph: ConnectivityGraph, alignment: AlignmentResult, global_scale: float,
                  local: dict | None = None, scale_mode: str = "global+local",
                  min_confidence: float = 0.0) -> GaussianModel:
    """Concatenate every pair's Gaussians with aligned positions and calibrated scales.

    ``local`` maps ``(edge_index, slot)`` to ``(spacing, keep_mask)``; it is
    computed from the raw pointmaps when omitted.  ``scale_mode`` picks the
    covariance calibration: raw predictor scales, raw scales times the global
    factor, or global factor x local spacing x normalized anisotropy.
    """
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
    parts = []
    for k, pred in enumerate(graph.predictions):
        H, W = pred.image_shape
        raw_ls = pred.log_scales
        base = raw_ls - raw_ls.mean()
        for slot, v in enumerate(pred.pair):
            rows = slice(slot * H * W, (slot + 1) * H * W)
            if local is not None and (k, slot) in local:
                s_l, keep = local[(k, slot)]
            else:
                s_l, keep = local_scale(pred.pointmaps[slot])
            sel = (keep & (pred.confidence[slot] > min_confidence)).ravel()
            if scale_mode == "none":
                ls = raw_ls[rows]
            elif scale_mode == "global":
                ls = raw_ls[rows] + np.log(global_scale)
            else:
                ls = np.log(global_scale) + np.log(s_l).reshape(-1, 1) + base[rows]
            pos = alignment.pointmaps[v].reshape(-1, 3)
            parts.append(GaussianModel(pos[sel], pred.rotations[rows][sel], ls[sel],
                                       pred.opacity_logits[rows][sel], pred.sh[rows][sel],
                                       pred.confidence[slot].ravel()[sel]))
    model = GaussianModel.concatenate(parts)
    if len(model) == 0:
        raise ValueError("initialization produced no Gaussians after masking")
    finite = np.all(np.isfinite(model.positions), axis=1) & np.all(np.isfinite(model.log_scales), axis=1)
    return model.subset(finite)


def initialize_gaussians(predictor: Predictor, cameras: list[Camera], stride: int = 1, align_steps: int = 500,
                         scale_mode: str = "global+local", global_scale: float | None = None) -> InitResult:
    """Full initialization for one device's ordered image set."""
    pairs = pair_images(len(cameras), stride)
    graph = build_graph(pairs, predictor, len(cameras))
    alignment = global_align(graph, cameras, steps=align_steps)
    if global_scale is None:
        global_scale = float(np.exp(np.mean(np.log(pair_global_scales(graph, alignment, cameras)))))
    model = assemble_init(graph, alignment, global_scale, scale_mode=scale_mode)
    return InitResult(model, graph, alignment, global_scale)


def knn_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Root-mean-square distance to the ``k`` nearest other points."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return np.ones(len(pts))
    k = min(k, len(pts) - 1)
    d, _ = cKDTree(pts).query(pts, k + 1)
    return np.sqrt(np.mean(d[:, 1:] ** 2, axis=1)) + 1e-12


def random_init(cameras: list[Camera], n: int, rng: np.random.Generator, depth_range: tuple[float, float],
                sh_degree: int = 1, opacity: float = 0.1) -> GaussianModel:
    """Baseline without a predictor: points on random camera rays at uniform depth.

    Colors are uniform random, isotropic scales come from nearest-neighbour
    spacing, opacities start low.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = depth_range
    if not 0 < lo < hi:
        raise ValueError("depth_range must satisfy 0 < lo < hi")
    which = rng.integers(0, len(cameras), n)
    pts = np.empty((n, 3))
    for c in range(len(cameras)):
        sel = np.flatnonzero(which == c)
        cam = cameras[c]
        u = rng.uniform(-0.5, cam.width - 0.5, len(sel))
        v = rng.uniform(-0.5, cam.height - 0.5, len(sel))
        z = rng.uniform(lo, hi, len(sel))
        p_cam = np.column_stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
        pts[sel] = cam.camera_to_world(p_cam)
    s = knn_scale(pts)
    return GaussianModel.from_colors(pts, rng.uniform(0, 1, (n, 3)), np.repeat(s[:, None], 3, axis=1),
                                     opacity, sh_degree=sh_degree)
