import socket
import threading
import time

import pytest

from miniio import net
from miniio.errors import ProtocolError


def pipe_channels(latency_us=0.0):
    srv = net.listener()
    host, port = srv.getsockname()
    out = {}

    def accept():
        conn, _ = srv.accept()
        out["server"] = net.Channel(conn)

    t = threading.Thread(target=accept)
    t.start()
    client = net.connect(host, port, latency_us)
    t.join()
    srv.close()
    return client, out["server"]


def test_frame_round_trip():
    a, b = pipe_channels()
    a.send(net.PUT_BLOCK, b"hello")
    msg_type, payload = b.recv()
    assert (msg_type, payload) == (net.PUT_BLOCK, b"hello")
    a.send(net.FIN)
    assert b.recv() == (net.FIN, b"")
    a.close(); b.close()


def test_obj_round_trip_with_body():
    a, b = pipe_channels()
    body = bytes(range(256))
    a.send_obj(net.DATA, {"x": 1, "s": "abc"}, body)
    msg_type, payload = b.recv()
    obj, got = net.split_obj(payload)
    assert msg_type == net.DATA
    assert obj == {"x": 1, "s": "abc"}
    assert got == body
    a.close(); b.close()


def test_recv_expect_rejects_wrong_type():
    a, b = pipe_channels()
    a.send(net.ERR, b"{}")
    with pytest.raises(ProtocolError):
        b.recv_expect(net.DATA)
    a.close(); b.close()


def test_eof_raises():
    a, b = pipe_channels()
    a.close()
    with pytest.raises(EOFError):
        b.recv()
    b.close()


def test_latency_injection_paces_sends():
    a, b = pipe_channels(latency_us=20_000)
    t0 = time.perf_counter()
    for _ in range(5):
        a.send(net.READY)
    for _ in range(5):
        b.recv()
    elapsed = time.perf_counter() - t0
    assert elapsed >= 0.1  # 5 frames x 20 ms
    a.close(); b.close()


def test_concurrent_sends_interleave_whole_frames():
    a, b = pipe_channels()
    n_threads, n_msgs = 4, 50

    def sender(tid):
        payload = bytes([tid]) * (100 + tid)
        for _ in range(n_msgs):
            a.send(net.REPORT, payload)

    threads = [threading.Thread(target=sender, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    seen = 0
    while seen < n_threads * n_msgs:
        msg_type, payload = b.recv()
        assert msg_type == net.REPORT
        assert payload == bytes([payload[0]]) * (100 + payload[0])
        seen += 1
    for t in threads:
        t.join()
    a.close(); b.close()
