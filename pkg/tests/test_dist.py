import math
import threading
import time

import numpy as np
import pytest

from fleetsplat.aggregate import DistillConfig
from fleetsplat.core import Camera, GaussianModel, Region, look_at, random_quaternions
from fleetsplat.dist import protocol as P
from fleetsplat.dist.device import EXIT_OK, EXIT_REJECTED, EXIT_TRANSPORT, DeviceConfig, run_device
from fleetsplat.dist.server import ACCEPTED_FROM_DEVICE, Server, ServerConfig, StragglerTimeout
from fleetsplat.dist.transport import LoopbackListener, SocketListener, TransportError, connect_tcp

CAMS = [Camera(20, 20, 8, 8, 16, 16, look_at([0, 0, 4], [0, 0, 0], up=(0, 1, 0)))]


def halves():
    return [Region(-math.inf, 0.0, -math.inf, math.inf, 0), Region(0.0, math.inf, -math.inf, math.inf, 1)]


def model_in(region, n, seed):
    rng = np.random.default_rng(seed)
    x0 = -2.0 if region.max_x <= 0 else 0.5
    pos = np.column_stack([rng.uniform(x0, x0 + 1.5, n), rng.uniform(-1, 1, n), rng.uniform(-0.1, 0.1, n)])
    m = GaussianModel(pos, random_quaternions(rng, n), np.full((n, 3), -3.0), np.zeros(n), rng.normal(size=(n, 4, 3)))
    # stored models travel as float32
    for name in ("positions", "rotations", "log_scales", "sh"):
        setattr(m, name, getattr(m, name).astype(np.float32).astype(np.float64))
    return m


class Background:
    """Run a server in a thread and keep its result or exception."""

    def __init__(self, cfg, listener):
        self.server = Server(cfg, listener)
        self.result = self.error = None
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        try:
            self.result = self.server.run()
        except Exception as exc:  # noqa: BLE001
            self.error = exc

    def join(self, timeout=30):
        self.thread.join(timeout)
        assert not self.thread.is_alive()
        return self


def handshake(listener, dev):
    conn = listener.connect()
    conn.send(P.hello(dev))
    return conn, conn.recv(5)


def test_single_device_loopback():
    listener = LoopbackListener()
    region = Region(-math.inf, math.inf, -math.inf, math.inf, 0)
    bg = Background(ServerConfig([region], DistillConfig(epochs=0)), listener)
    res = run_device(DeviceConfig(0), listener.connect, lambda r: (model_in(Region(-9, 0, -9, 9), 10, 0), CAMS))
    bg.join()
    assert res.exit_code == EXIT_OK and res.region == region
    uploads = [t for d, t in bg.result.state.received_types if t == P.MsgType.MODEL_UPLOAD]
    assert len(uploads) == 1
    assert bg.result.model.equals(res.model)


def test_two_devices_over_tcp_merge_sizes():
    listener = SocketListener("127.0.0.1:0")
    regions = halves()
    bg = Background(ServerConfig(regions, DistillConfig(epochs=0)), listener)
    out = {}

    def dev(i):
        out[i] = run_device(DeviceConfig(i), lambda: connect_tcp(listener.address),
                            lambda r: (model_in(r, 7 + i, i), CAMS))
    ts = [threading.Thread(target=dev, args=(i,)) for i in (0, 1)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)
    bg.join()
    listener.close()
    assert [out[i].exit_code for i in (0, 1)] == [EXIT_OK, EXIT_OK]
    assert len(bg.result.model) == 7 + 8


def test_unreachable_server_fails_after_retries():
    def connect():
        raise TransportError("connection refused")
    res = run_device(DeviceConfig(0, retries=3, backoff=0.001), connect, lambda r: None)
    assert res.exit_code == EXIT_TRANSPORT and res.attempts == 4


def test_real_refused_port():
    listener = SocketListener("127.0.0.1:0")
    addr = listener.address
    listener.close()
    res = run_device(DeviceConfig(0, retries=1, backoff=0.001), lambda: connect_tcp(addr), lambda r: None)
    assert res.exit_code == EXIT_TRANSPORT


def test_duplicate_and_unknown_device_rejected():
    listener = LoopbackListener()
    bg = Background(ServerConfig(halves(), straggler_timeout=1.0), listener)
    c0, reply = handshake(listener, 0)
    assert reply.type == P.MsgType.REGION_ASSIGN
    c0b, reply = handshake(listener, 0)
    assert reply.type == P.MsgType.ERROR and P.parse_error(reply)[0] == P.ERR_DUPLICATE_ID
    c9, reply = handshake(listener, 9)
    assert P.parse_error(reply)[0] == P.ERR_UNKNOWN_DEVICE
    res = run_device(DeviceConfig(0, retries=0), listener.connect, lambda r: None)
    assert res.exit_code == EXIT_REJECTED
    bg.join()
    assert isinstance(bg.error, StragglerTimeout)


def test_idempotent_and_conflicting_uploads():
    listener = LoopbackListener()
    bg = Background(ServerConfig(halves(), DistillConfig(epochs=0), straggler_timeout=2.0), listener)
    conn, _ = handshake(listener, 0)
    up = P.model_upload(model_in(halves()[0], 5, 1), CAMS)
    conn.send(up)
    assert conn.recv(5).type == P.MsgType.ACK
    conn.send(up)
    assert conn.recv(5).type == P.MsgType.ACK
    conn.send(P.model_upload(model_in(halves()[0], 6, 2), CAMS))
    reply = conn.recv(5)
    assert P.parse_error(reply)[0] == P.ERR_CONFLICTING_UPLOAD
    c1, _ = handshake(listener, 1)
    c1.send(P.model_upload(model_in(halves()[1], 4, 3), CAMS))
    assert c1.recv(5).type == P.MsgType.ACK
    bg.join()
    assert bg.error is None
    assert bg.result.state.duplicate_uploads == 1
    assert len(bg.result.model) == 9       # the first upload of device 0 was kept


def test_unknown_type_keeps_connection():
    listener = LoopbackListener()
    bg = Background(ServerConfig(halves(), straggler_timeout=1.0), listener)
    conn, _ = handshake(listener, 0)
    frame = bytearray(P.encode(P.ack()))
    frame[6:8] = (250).to_bytes(2, "little")
    conn.send_bytes(bytes(frame))
    assert P.parse_error(conn.recv(5))[0] == P.ERR_UNKNOWN_TYPE
    # a well-formed but disallowed type is refused too, and the link still works
    conn.send(P.Message(P.MsgType.AGGREGATE_DONE, b""))
    assert P.parse_error(conn.recv(5))[0] == P.ERR_UNEXPECTED
    conn.send(P.hello(0))
    assert conn.recv(5).type == P.MsgType.REGION_ASSIGN
    bg.join()


def test_only_hello_and_upload_accepted():
    assert ACCEPTED_FROM_DEVICE == {P.MsgType.HELLO, P.MsgType.MODEL_UPLOAD}


def test_straggler_timeout_reports_missing():
    listener = LoopbackListener()
    bg = Background(ServerConfig(halves(), straggler_timeout=0.5), listener)
    res = run_device(DeviceConfig(1), listener.connect, lambda r: (model_in(r, 3, 0), CAMS))
    t0 = time.monotonic()
    bg.join()
    assert time.monotonic() - t0 < 5
    assert res.exit_code == EXIT_OK
    assert isinstance(bg.error, StragglerTimeout)
    assert bg.error.received == [1] and bg.error.missing == [0]
