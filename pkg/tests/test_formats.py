import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fleetsplat.core import Camera, GaussianModel, look_at, random_quaternions
from fleetsplat.data import formats as F
from fleetsplat.data.synthetic import synth_scene
from fleetsplat.initialize import SyntheticPredictor

f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


def make_model(rng, n, deg):
    k = (deg + 1) ** 2
    m = GaussianModel(rng.normal(size=(n, 3)), random_quaternions(rng, n), rng.normal(size=(n, 3)),
                      rng.normal(size=n), rng.normal(size=(n, k, 3)), rng.uniform(size=n))
    # values already representable in float32 survive bit for bit
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh", "confidence"):
        setattr(m, name, getattr(m, name).astype(np.float32).astype(np.float64))
    return m


@settings(max_examples=60)
@given(st.integers(0, 40), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_model_round_trip(n, deg, seed):
    m = make_model(np.random.default_rng(seed), n, deg)
    back = F.model_from_bytes(F.model_to_bytes(m))
    assert back.equals(m) and np.array_equal(back.confidence, m.confidence)


def test_model_corruption(rng):
    data = F.model_to_bytes(make_model(rng, 6, 1))
    with pytest.raises(F.ChecksumMismatch):
        F.model_from_bytes(data[:20] + bytes([data[20] ^ 4]) + data[21:])
    with pytest.raises(F.FormatError):
        F.model_from_bytes(data[:-9])
    with pytest.raises(F.BadMagic):
        F.model_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(F.Truncated):
        F.model_from_bytes(data[:2])


@settings(max_examples=40)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3)), elements=f32))
def test_pfm_color_bits(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pfm") / "a.pfm"
    F.save_pfm(path, img)
    back = F.load_image(path)
    assert back.dtype == np.float32 and np.array_equal(back.view(np.uint32), img.view(np.uint32))


@settings(max_examples=40)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=f32))
def test_pfm_depth_bits(tmp_path_factory, depth):
    path = tmp_path_factory.mktemp("pfm") / "d.pfm"
    F.save_pfm(path, depth)
    assert np.array_equal(F.load_depth(path), depth)


def test_pfm_orientation_and_errors(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    F.save_pfm(tmp_path / "x.pfm", img)
    raw = (tmp_path / "x.pfm").read_bytes()
    # bottom row is stored first
    assert np.frombuffer(raw[-18 * 4:-9 * 4], "<f4")[0] == img[1, 0, 0]
    (tmp_path / "t.pfm").write_bytes(raw[:-4])
    with pytest.raises(F.Truncated):
        F.load_pfm(tmp_path / "t.pfm")
    with pytest.raises(F.ShapeMismatch):
        F.load_depth(tmp_path / "x.pfm")
    with pytest.raises(F.ShapeMismatch):
        F.save_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 2)))


def test_ppm_quantization(tmp_path, rng):
    img = rng.uniform(size=(5, 4, 3))
    F.save_ppm(tmp_path / "a.ppm", img)
    back = F.load_image(tmp_path / "a.ppm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_cameras_round_trip(tmp_path):
    cams = {i: Camera(20.5 + i, 21, 8, 7.25, 16, 14, look_at([i, 0.3, 3], [0, 0, 0], up=(0, 1, 0)), 0.05, 50.0)
            for i in range(4)}
    F.write_cameras_txt(tmp_path / "c.txt", cams)
    back = F.read_cameras_txt(tmp_path / "c.txt")
    for i, c in cams.items():
        assert np.array_equal(back[i].pose, c.pose) and back[i].fx == c.fx and back[i].far == c.far
    binary = F.cameras_from_bytes(F.cameras_to_bytes(list(cams.values())))
    assert all(np.array_equal(a.pose, b.pose) for a, b in zip(binary, cams.values()))


def test_pairpred_round_trip(tmp_path):
    sc = synth_scene(2, n_cameras=4, n_gaussians=200, width=8, height=8, heldout_every=0)
    pred = SyntheticPredictor(sc.cameras, sc.images, sc.depths, seed=3, noise=0.01)(0, 2)
    F.save_pairpred(tmp_path / "p.dpp", pred)
    back = F.load_pairpred(tmp_path / "p.dpp")
    assert back.pair == (0, 2) and back.true_scale == pytest.approx(pred.true_scale)
    for name in ("pointmaps", "confidence", "rotations", "log_scales", "opacity_logits", "sh"):
        a, b = getattr(pred, name), getattr(back, name)
        assert np.array_equal(a.astype(np.float32), b)
    raw = (tmp_path / "p.dpp").read_bytes()
    with pytest.raises(F.FormatError):
        F.pairpred_from_bytes(raw[:-12])
