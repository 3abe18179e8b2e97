import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetsplat.core import quat_to_rotmat, random_quaternions
from fleetsplat.data.formats import save_pairpred
from fleetsplat.data.synthetic import SceneParams, synth_scene
from fleetsplat.initialize import (AlignmentResult, ConnectivityGraph, DisconnectedGraphError, FilePredictor,
                                   SyntheticPredictor, assemble_init, build_graph, global_align,
                                   icp_global_scale, local_scale, pair_global_scales, pair_images, random_init)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(3, SceneParams(n_cameras=6, n_gaussians=800, width=24, height=24, heldout_every=0))


def predictor(scene, **kw):
    return SyntheticPredictor(scene.cameras, scene.images, scene.depths, scene.alphas, **kw)


def world_rmse(scene, alignment):
    err = []
    for v, X in alignment.pointmaps.items():
        m = scene.alphas[v] > 0.5
        err.append(np.sum((X - scene.cameras[v].backproject(scene.depths[v]))[m] ** 2, axis=-1))
    return float(np.sqrt(np.mean(np.concatenate(err))))


# ---------------------------------------------------------------------------
# pairing and graphs


def test_pair_images():
    assert pair_images(5, 1) == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert pair_images(5, 2) == [(0, 1), (2, 3)]
    assert pair_images(2, 7) == [(0, 1)]
    with pytest.raises(ValueError):
        pair_images(1)
    with pytest.raises(ValueError):
        pair_images(4, 0)


def test_graph_path_and_bridging(scene):
    pred = predictor(scene)
    g = build_graph(pair_images(4, 1), pred, 4)
    assert g.is_connected() and g.edges == [(0, 1), (1, 2), (2, 3)] and not g.bridged
    g = build_graph([(0, 1), (2, 3)], pred, 4)
    assert g.bridged == [(1, 2)] and g.is_connected()
    with pytest.raises(DisconnectedGraphError):
        build_graph([(0, 1), (2, 3)], pred, 4, bridge=False)


def test_graph_carries_oracle_scales(scene):
    scales = {(0, 1): 0.7, (1, 2): 1.9}
    g = build_graph(pair_images(3), predictor(scene, fixed_scales=scales), 3)
    for e, pr in zip(g.edges, g.predictions):
        assert pr.pair == e and pr.true_scale == scales[e]
        assert pr.pointmaps.shape == (2, 24, 24, 3) and len(pr.log_scales) == 2 * 24 * 24


def test_predictor_deterministic_and_file_backed(scene, tmp_path):
    a = predictor(scene, seed=4, noise=0.01)(1, 2)
    b = predictor(scene, seed=4, noise=0.01)(1, 2)
    assert a.equals(b)
    save_pairpred(tmp_path / "pair_0001_0002.dpp", a)
    c = FilePredictor(tmp_path)(1, 2)
    assert np.array_equal(c.pointmaps, a.pointmaps.astype(np.float32))


def test_predictor_zero_confidence_off_scene(scene):
    pr = predictor(scene, noise=0.01)(0, 1)
    assert np.all(pr.confidence[0][scene.alphas[0] <= 0.5] == 0)
    assert np.all(pr.confidence >= 0) and np.all(pr.confidence <= 1)


# ---------------------------------------------------------------------------
# global alignment


def test_alignment_noiseless_equal_scales(scene):
    scales = {e: 1.3 for e in pair_images(6)}
    g = build_graph(pair_images(6), predictor(scene, fixed_scales=scales), 6)
    al = global_align(g, scene.cameras, steps=200)
    assert world_rmse(scene, al) < 1e-3


def test_alignment_recovers_two_edge_scales(scene):
    scales = {(0, 1): 0.5, (1, 2): 2.0}
    g = build_graph(pair_images(3), predictor(scene, fixed_scales=scales), 3)
    al = global_align(g, scene.cameras, steps=100)
    rel = al.relative_scales
    assert np.allclose(rel, [0.5, 2.0], rtol=0.02)
    assert abs(np.prod(rel) - 1) < 1e-9


def test_alignment_objective_monotone_and_gauge(scene):
    g = build_graph(pair_images(6, 2), predictor(scene, seed=1, noise=0.01), 6)
    products = []
    al = global_align(g, scene.cameras, steps=150, checkpoint_every=10,
                      callback=lambda step, f, rel: products.append(np.prod(rel)))
    values = [v for _, v in al.history]
    assert all(b <= a + 1e-6 for a, b in zip(values, values[1:]))
    assert al.final_objective < al.initial_objective
    assert np.allclose(products, 1.0, atol=1e-9)


def test_alignment_contract(scene):
    g = build_graph(pair_images(3), predictor(scene), 3)
    with pytest.raises(ValueError):
        global_align(g, scene.cameras, steps=0)
    broken = ConnectivityGraph(4, [(0, 1), (2, 3)], g.predictions[:1] * 2)
    with pytest.raises(DisconnectedGraphError):
        global_align(broken, scene.cameras, steps=5)


# ---------------------------------------------------------------------------
# scale calibration


def test_icp_examples(rng):
    src = rng.normal(size=(300, 3))
    assert abs(icp_global_scale(src, 2.0 * src) - 2.0) < 1e-6
    assert abs(icp_global_scale(src, src) - 1.0) < 1e-9
    with pytest.raises(ValueError):
        icp_global_scale(np.ones((10, 3)), src)
    with pytest.raises(ValueError):
        icp_global_scale(src[:2], src)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20)
def test_icp_planted_scale_under_noise(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-1, 1, (400, 3))
    tgt = 1.7 * src + rng.normal(0, 0.01 * 1.7 * src.std(), src.shape) + rng.normal(size=3)
    assert abs(icp_global_scale(src, tgt) / 1.7 - 1) < 0.01


def test_pair_global_scale_matches_true_scale(scene):
    g = build_graph(pair_images(4), predictor(scene, seed=2, noise=0.002), 4)
    al = global_align(g, scene.cameras[:4], steps=200)
    true = np.array([pr.true_scale for pr in g.predictions])
    assert np.allclose(pair_global_scales(g, al, scene.cameras), true, rtol=0.05)


def test_local_scale_uniform_grid():
    v, u = np.mgrid[0:6, 0:7].astype(float)
    X = np.stack([0.25 * u, 0.25 * v, np.full_like(u, 3.0)], axis=-1)
    s, keep = local_scale(X)
    assert np.allclose(s, 0.25) and keep.all()


def test_local_scale_outlier_masked():
    v, u = np.mgrid[0:8, 0:8].astype(float)
    X = np.stack([u, v, np.full_like(u, 3.0)], axis=-1)
    X[4, 4] *= 10.0
    s, keep = local_scale(X)
    assert not keep[4, 4] and s[4, 4] > 5 * np.median(s)
    assert keep[np.abs(np.arange(8)[:, None] - 4) + np.abs(np.arange(8) - 4) > 1].all()


def test_local_scale_matches_double_loop(rng):
    H, W = 7, 9
    v, u = np.mgrid[0:H, 0:W].astype(float)
    X = np.stack([u, v, np.sin(u / 3) + np.cos(v / 2)], axis=-1) + rng.normal(0, 0.01, (H, W, 3))
    s, _ = local_scale(X)
    ref = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            d = [np.linalg.norm(X[i, j] - X[a, b]) for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))
                 if 0 <= a < H and 0 <= b < W]
            ref[i, j] = sum(d) / len(d)
    assert np.abs(s - ref).max() < 1e-9


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10))
@settings(max_examples=25)
def test_local_scale_similarity_covariance(seed, a):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 6, 3))
    R = quat_to_rotmat(random_quaternions(rng, 1)[0])
    s, _ = local_scale(X)
    s2, _ = local_scale(a * X @ R.T + rng.normal(size=3))
    assert np.allclose(s2, a * s, rtol=1e-9)


# ---------------------------------------------------------------------------
# assembly


def single_pair(scene, H=24, W=24):
    # no coverage mask, so every pixel has positive confidence
    pr = SyntheticPredictor(scene.cameras, scene.images, scene.depths)(0, 1)
    al = AlignmentResult({0: pr.pointmaps[0], 1: pr.pointmaps[1]}, {}, np.ones(1), 1.0, [], 0.0, 0.0)
    return ConnectivityGraph(2, [(0, 1)], [pr]), al, pr


def test_assemble_pass_through(scene):
    g, al, pr = single_pair(scene)
    ones = {(0, s): (np.ones((24, 24)), np.ones((24, 24), bool)) for s in (0, 1)}
    m = assemble_init(g, al, 1.0, local=ones)
    assert len(m) == 2 * 24 * 24
    assert np.array_equal(m.positions, pr.pointmaps.reshape(-1, 3))
    assert np.allclose(np.exp(m.log_scales.mean()), 1.0)       # base scales normalized
    assert np.array_equal(m.sh, pr.sh) and np.array_equal(m.confidence, pr.confidence.ravel())


def test_assemble_counts_masked(scene, rng):
    g, al, _ = single_pair(scene)
    masks = {(0, s): (np.ones((24, 24)), rng.uniform(size=(24, 24)) < 0.5) for s in (0, 1)}
    m = assemble_init(g, al, 2.0, local=masks)
    assert len(m) == sum(int(k.sum()) for _, k in masks.values())
    assert np.all(np.isfinite(m.log_scales)) and np.all(np.isfinite(m.positions))


def test_assemble_scale_modes(scene):
    g, al, pr = single_pair(scene)
    none = assemble_init(g, al, 3.0, scale_mode="none")
    glob = assemble_init(g, al, 3.0, scale_mode="global")
    assert np.allclose(glob.log_scales - none.log_scales, np.log(3.0))
    with pytest.raises(ValueError):
        assemble_init(g, al, 1.0, scale_mode="bogus")
    empty = {(0, s): (np.ones((24, 24)), np.zeros((24, 24), bool)) for s in (0, 1)}
    with pytest.raises(ValueError):
        assemble_init(g, al, 1.0, local=empty)


def test_random_init(scene, rng):
    m = random_init(scene.cameras, 200, rng, (0.2, 0.6))
    assert len(m) == 200 and np.all(np.isfinite(m.log_scales))
    assert np.allclose(m.opacities, 0.1)
