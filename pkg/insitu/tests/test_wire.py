import json
import socket
import struct
import threading

import pytest

from sliceview import wire


def test_frame_layout():
    srv, cli = socket.socketpair()
    wire.send_frame(cli, wire.STEP_RELEASE, b'{"step":3}')
    raw = srv.recv(64)
    length, msg_type = struct.unpack_from("<IB", raw)
    assert (length, msg_type) == (10, wire.STEP_RELEASE)
    assert raw[5:] == b'{"step":3}'
    srv.close(); cli.close()


def test_recv_frame_round_trip():
    srv, cli = socket.socketpair()
    wire.send_json(cli, wire.GET_REQ, {"step": 1, "var": "T", "rank": 0})
    msg_type, payload = wire.recv_frame(srv)
    assert msg_type == wire.GET_REQ
    assert json.loads(payload) == {"step": 1, "var": "T", "rank": 0}
    srv.close(); cli.close()


def test_handshake_rejects_wrong_version_reply():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    host, port = listener.getsockname()

    def fake_writer():
        conn, _ = listener.accept()
        msg_type, payload = wire.recv_frame(conn)
        assert msg_type == wire.HELLO_R
        assert json.loads(payload)["version"] == wire.VERSION
        wire.send_json(conn, wire.HELLO_W, {
            "version": 99, "session": "x", "world_size": 1,
            "variables": [], "dataplane": {"kind": "tcp", "endpoints": {}}})
        conn.close()

    t = threading.Thread(target=fake_writer, daemon=True)
    t.start()
    with pytest.raises(wire.ProtocolError):
        wire.StreamSource(f"{host}:{port}")
    t.join(5)
    listener.close()


def test_err_frame_raises():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    host, port = listener.getsockname()

    def fake_writer():
        conn, _ = listener.accept()
        wire.recv_frame(conn)
        wire.send_json(conn, wire.ERR, {"code": "version", "message": "nope"})
        conn.close()

    t = threading.Thread(target=fake_writer, daemon=True)
    t.start()
    with pytest.raises(wire.ProtocolError, match="nope"):
        wire.StreamSource(f"{host}:{port}")
    t.join(5)
    listener.close()
