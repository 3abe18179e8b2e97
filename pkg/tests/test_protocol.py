import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetsplat.core import Camera, GaussianModel, Region, look_at, random_quaternions
from fleetsplat.dist import protocol as P

types = st.sampled_from(list(P.MsgType))


def test_empty_ack_frame_layout():
    frame = P.encode(P.ack())
    # magic 4 + version 2 + type 2 + length 8 + crc 4
    assert len(frame) == 20
    assert frame[:4] == P.MAGIC
    assert struct.unpack("<HHQ", frame[4:16]) == (1, int(P.MsgType.ACK), 0)
    assert struct.unpack("<I", frame[16:]) == (zlib.crc32(b""),)


@settings(max_examples=200)
@given(types, st.binary(max_size=300))
def test_round_trip(kind, payload):
    msg = P.Message(kind, payload)
    frame = P.encode(msg)
    assert len(frame) == 20 + len(payload)
    assert P.decode(frame) == msg


@settings(max_examples=200)
@given(types, st.binary(min_size=1, max_size=100), st.data())
def test_flipped_payload_bit_is_checksum_error(kind, payload, data):
    frame = bytearray(P.encode(P.Message(kind, payload)))
    pos = data.draw(st.integers(16, 16 + len(payload) - 1))
    frame[pos] ^= 1 << data.draw(st.integers(0, 7))
    with pytest.raises(P.BadChecksum):
        P.decode(bytes(frame))


@settings(max_examples=200)
@given(types, st.binary(max_size=64), st.data())
def test_every_prefix_is_truncated(kind, payload, data):
    frame = P.encode(P.Message(kind, payload))
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(P.Truncated):
        P.decode(frame[:cut])


def test_typed_errors():
    good = P.encode(P.Message(P.MsgType.HELLO, b"abcd"))
    with pytest.raises(P.BadMagic):
        P.decode(b"XXXX" + good[4:])
    with pytest.raises(P.BadVersion):
        P.decode(good[:4] + struct.pack("<H", 9) + good[6:])
    with pytest.raises(P.UnknownType) as exc:
        P.decode(good[:6] + struct.pack("<H", 77) + good[8:])
    assert exc.value.consumed == len(good)
    with pytest.raises(P.FrameTooLarge):
        P.decode(good[:8] + struct.pack("<Q", 1 << 40) + good[16:])
    with pytest.raises(P.BadPayload):
        P.decode(good + b"\x00")


@settings(max_examples=300)
@given(st.binary(max_size=64))
def test_fuzz_only_protocol_errors(junk):
    try:
        P.decode(junk)
    except P.ProtocolError:
        pass


def test_stream_decoder_chunks_and_unknown_type():
    msgs = [P.hello(3), P.ack(), P.Message(P.MsgType.ERROR, b"\x01\x00boom")]
    frames = [P.encode(m) for m in msgs]
    odd = bytearray(P.encode(P.ack()))
    odd[6:8] = struct.pack("<H", 99)
    stream = frames[0] + bytes(odd) + frames[1] + frames[2]
    dec = P.FrameDecoder()
    out = []
    unknown = 0
    for i in range(0, len(stream), 3):
        dec.feed(stream[i:i + 3])
        while True:
            try:
                m = dec.next()
            except P.UnknownType:
                unknown += 1
                continue
            if m is None:
                break
            out.append(m)
    assert out == msgs and unknown == 1 and not dec.buffer


def test_payload_helpers(rng):
    assert P.parse_hello(P.hello(12)) == 12
    r = Region(-np.inf, 0.5, 1.0, np.inf, device_id=4)
    assert P.parse_region_assign(P.region_assign(r)) == r
    assert P.parse_error(P.error(101, "dup")) == (101, "dup")
    n = 5
    model = GaussianModel(rng.normal(size=(n, 3)), random_quaternions(rng, n), rng.normal(size=(n, 3)),
                          rng.normal(size=n), rng.normal(size=(n, 4, 3)))
    cams = [Camera(20, 21, 8, 7, 16, 14, look_at([0, 0, 3], [0, 0, 0], up=(0, 1, 0)))]
    m2, c2 = P.parse_model_upload(P.model_upload(model, cams))
    assert np.allclose(m2.positions, model.positions, rtol=1e-6) and len(c2) == 1
    with pytest.raises(P.BadPayload):
        P.parse_model_upload(P.Message(P.MsgType.MODEL_UPLOAD, b"short"))
    with pytest.raises(P.BadPayload):
        P.parse_hello(P.Message(P.MsgType.HELLO, b"\x00"))
