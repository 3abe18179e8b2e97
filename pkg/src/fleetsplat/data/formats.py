"""Binary and text formats: models (.dgs), camera lists, pair predictions, PPM/PFM.

All binary formats are little-endian and end with a CRC-32 of every byte
before the footer.  Float payloads are 32-bit; a float64 model saved and
reloaded comes back rounded to float32 (and is stable from then on).
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from ..core import Camera, GaussianModel, sh_coeff_count

MODEL_MAGIC = b"DGS1"
CAMERAS_MAGIC = b"DGC1"
PAIRPRED_MAGIC = b"DPP1"


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class ShapeMismatch(FormatError):
    pass


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _strip_crc(data: bytes, magic: bytes, min_len: int) -> memoryview:
    if len(data) < len(magic) or data[:len(magic)] != magic:
        if len(data) < len(magic) and magic.startswith(bytes(data)):
            raise Truncated("file shorter than its magic")
        raise BadMagic(f"expected magic {magic!r}, got {bytes(data[:len(magic)])!r}")
    if len(data) < min_len + 4:
        raise Truncated(f"need at least {min_len + 4} bytes, got {len(data)}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC-32 mismatch")
    return memoryview(body)


# ---------------------------------------------------------------------------
# models

def model_record_floats(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 1 + 3 * sh_coeff_count(sh_degree)


def model_to_bytes(model: GaussianModel) -> bytes:
    n = len(model)
    rec = np.concatenate([model.positions, model.rotations, model.log_scales,
                          model.opacity_logits[:, None], model.confidence[:, None],
                          model.sh.reshape(n, model.sh.shape[1] * 3)], axis=1)
    header = MODEL_MAGIC + struct.pack("<BQ", model.sh_degree, n)
    return _with_crc(header + rec.astype("<f4").tobytes())


def model_from_bytes(data: bytes) -> GaussianModel:
    body = _strip_crc(data, MODEL_MAGIC, 13)
    deg, n = struct.unpack_from("<BQ", body, 4)
    if deg > 3:
        raise FormatError(f"unsupported SH degree {deg}")
    width = model_record_floats(deg)
    payload = body[13:]
    if len(payload) != 4 * width * n:
        raise ShapeMismatch(f"body holds {len(payload)} bytes, header promises {n} records of {width} floats")
    rec = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, width)
    k = sh_coeff_count(deg)
    return GaussianModel(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 12:].reshape(n, k, 3),
                         rec[:, 11])


def save_model(path, model: GaussianModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> GaussianModel:
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# cameras

_CAM = struct.Struct("<4d2I12d2d")


def cameras_to_bytes(cameras: list[Camera]) -> bytes:
    out = [CAMERAS_MAGIC, struct.pack("<Q", len(cameras))]
    for c in cameras:
        out.append(_CAM.pack(c.fx, c.fy, c.cx, c.cy, c.width, c.height, *c.pose[:3, :4].ravel(),
                             c.near, c.far))
    return _with_crc(b"".join(out))


def cameras_from_bytes(data: bytes) -> list[Camera]:
    body = _strip_crc(data, CAMERAS_MAGIC, 12)
    (n,) = struct.unpack_from("<Q", body, 4)
    if len(body) != 12 + n * _CAM.size:
        raise ShapeMismatch(f"camera list of {n} entries has wrong length")
    cams = []
    for i in range(n):
        vals = _CAM.unpack_from(body, 12 + i * _CAM.size)
        pose = np.array(vals[6:18]).reshape(3, 4)
        try:
            cams.append(Camera(*vals[:4], int(vals[4]), int(vals[5]), pose, vals[18], vals[19]))
        except ValueError as exc:
            raise FormatError(f"invalid camera record {i}: {exc}") from exc
    return cams


def camera_to_line(cam_id: int, c: Camera) -> str:
    vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, *c.pose[:3, :4].ravel(), c.near, c.far]
    return " ".join([str(cam_id)] + [repr(float(v)) if not isinstance(v, int) else str(v) for v in vals])


def write_cameras_txt(path, cameras: dict[int, Camera]) -> None:
    lines = ["# id fx fy cx cy W H pose(3x4 row-major, world-from-camera) near far"]
    lines += [camera_to_line(i, c) for i, c in sorted(cameras.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras_txt(path) -> dict[int, Camera]:
    cams = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 21:
            raise FormatError(f"{path}:{lineno}: expected 21 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        pose = np.array(vals[7:19]).reshape(3, 4)
        cams[int(parts[0])] = Camera(vals[1], vals[2], vals[3], vals[4], int(vals[5]), int(vals[6]), pose,
                                     vals[19], vals[20])
    return cams


# ---------------------------------------------------------------------------
# images and depths

def save_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_header_tokens(buf: io.BytesIO, count: int) -> list[bytes]:
    tokens = []
    while len(tokens) < count:
        line = buf.readline()
        if not line:
            raise Truncated("header ended early")
        line = line.split(b"#")[0]
        tokens += line.split()
    return tokens


def load_ppm(path) -> np.ndarray:
    buf = io.BytesIO(Path(path).read_bytes())
    tokens = _read_header_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise BadMagic(f"not a binary PPM: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise FormatError("only 8-bit PPM supported")
    raw = buf.read()
    if len(raw) < w * h * 3:
        raise Truncated("PPM pixel data truncated")
    return np.frombuffer(raw[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def save_pfm(path, array: np.ndarray) -> None:
    """PFM (little-endian, bottom-to-top rows); (H, W, 3) -> 'PF', (H, W) -> 'Pf'."""
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    elif arr.ndim == 2:
        tag = b"Pf"
    else:
        raise ShapeMismatch(f"PFM holds (H,W) or (H,W,3), got {arr.shape}")
    h, w = arr.shape[:2]
    data = np.ascontiguousarray(arr[::-1].astype("<f4")).tobytes()
    Path(path).write_bytes(tag + f"\n{w} {h}\n-1.0\n".encode() + data)


def load_pfm(path) -> np.ndarray:
    """Loads as float32 so that every stored bit is preserved."""
    buf = io.BytesIO(Path(path).read_bytes())
    tokens = _read_header_tokens(buf, 4)
    tag = tokens[0]
    if tag not in (b"PF", b"Pf"):
        raise BadMagic(f"not a PFM file: {tag!r}")
    w, h = int(tokens[1]), int(tokens[2])
    scale = float(tokens[3])
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    raw = buf.read()
    if len(raw) < 4 * w * h * ch:
        raise Truncated("PFM data truncated")
    arr = np.frombuffer(raw[:4 * w * h * ch], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w, 3) if ch == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr)


save_image = save_pfm
save_depth = save_pfm


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return load_ppm(path)
    img = load_pfm(path)
    if img.ndim != 3:
        raise ShapeMismatch(f"{path} is not a color image")
    return img


def load_depth(path) -> np.ndarray:
    d = load_pfm(path)
    if d.ndim != 2:
        raise ShapeMismatch(f"{path} is not a depth map")
    return d


# ---------------------------------------------------------------------------
# pair predictions

def pairpred_to_bytes(pred) -> bytes:
    H, W = pred.pointmaps.shape[1:3]
    k = pred.sh.shape[1]
    deg = int(round(np.sqrt(k))) - 1
    true_scale = np.nan if pred.true_scale is None else pred.true_scale
    header = PAIRPRED_MAGIC + struct.pack("<4IBd", pred.pair[0], pred.pair[1], H, W, deg, true_scale)
    arrays = [pred.pointmaps, pred.confidence, pred.rotations, pred.log_scales, pred.opacity_logits, pred.sh]
    return _with_crc(header + b"".join(np.asarray(a).astype("<f4").tobytes() for a in arrays))


_PP_HEADER = 4 + struct.calcsize("<4IBd")


def pairpred_from_bytes(data: bytes):
    from ..initialize import PairPrediction

    body = _strip_crc(data, PAIRPRED_MAGIC, _PP_HEADER)
    p, q, H, W, deg, true_scale = struct.unpack_from("<4IBd", body, 4)
    K = 2 * H * W
    nc = sh_coeff_count(deg)
    shapes = [(2, H, W, 3), (2, H, W), (K, 4), (K, 3), (K,), (K, nc, 3)]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(body) - _PP_HEADER != 4 * sum(sizes):
        raise ShapeMismatch("pair prediction body length does not match its header")
    flat = np.frombuffer(body[_PP_HEADER:], dtype="<f4").astype(np.float64)
    parts, off = [], 0
    for shape, size in zip(shapes, sizes):
        parts.append(flat[off:off + size].reshape(shape))
        off += size
    return PairPrediction((p, q), *parts, true_scale=None if np.isnan(true_scale) else true_scale)


def save_pairpred(path, pred) -> None:
    Path(path).write_bytes(pairpred_to_bytes(pred))


def load_pairpred(path):
    return pairpred_from_bytes(Path(path).read_bytes())
