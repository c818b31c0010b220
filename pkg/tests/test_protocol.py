import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import offguard as og
from offguard import protocol as proto
from offguard.errors import (
    BadMagicError,
    DomainError,
    LengthOverflowError,
    ParseError,
    TrailingBytesError,
    TransportError,
    UnknownTypeError,
    VersionMismatchError,
)
from offguard.geometry import Region
from offguard.tensor import as_tensor
from offguard.wire import pack_u64


def _random_tensor(rng, max_rank=3, max_dim=5):
    rank = int(rng.integers(1, max_rank + 1))
    shape = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(rank))
    return rng.normal(size=shape).astype(np.float32)


def _random_commit(rng):
    n = int(rng.integers(1, 6))
    roots = tuple(bytes(rng.integers(0, 256, 32, dtype=np.uint8)) for _ in range(n))
    return og.MerkleCommit(bytes(rng.integers(0, 256, 32, dtype=np.uint8)), int(rng.integers(1, 99)), roots)


def _random_message(rng):
    kind = int(rng.integers(0, 7))
    if kind == 0:
        role = ["full", "share_plus", "share_minus", "single_layer"][int(rng.integers(0, 4))]
        li = int(rng.integers(0, 9)) if role == "single_layer" else None
        return proto.SetupModel(role, bytes(rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8)), li)
    if kind == 1:
        return proto.SetupAck(["full", "share_plus", "share_minus"][int(rng.integers(0, 3))])
    if kind == 2:
        mode = proto.MODE_HOLISTIC if rng.integers(0, 2) == 0 else proto.MODE_LAYER
        li = int(rng.integers(0, 9)) if mode == proto.MODE_LAYER else None
        ratio = float(np.float32(rng.uniform(1e-3, 1.0)))
        return proto.InferRequest(int(rng.integers(0, 2**63)), mode, _random_tensor(rng), ratio, li)
    if kind == 3:
        return proto.InferResponse(int(rng.integers(0, 2**63)), _random_tensor(rng), _random_commit(rng))
    if kind == 4:
        regions = tuple(
            (int(rng.integers(0, 8)), Region((int(rng.integers(0, 4)),), (int(rng.integers(1, 4)),)))
            for _ in range(int(rng.integers(0, 4)))
        )
        return proto.VerifyRequest(int(rng.integers(0, 2**63)), regions)
    if kind == 5:
        return proto.VerifyResponse(
            int(rng.integers(0, 2**63)),
            bytes(rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8)),
        )
    return proto.ErrorMessage(int(rng.integers(0, 2**16)), "worker says " + str(rng.integers(0, 10**6)))


def _messages_equal(a, b):
    if type(a) is not type(b):
        return False
    if isinstance(a, proto.InferRequest):
        return (
            a.inference_id == b.inference_id
            and a.mode == b.mode
            and a.layer_index == b.layer_index
            and np.float32(a.verify_ratio) == np.float32(b.verify_ratio)
            and a.input.tobytes() == b.input.tobytes()
            and a.input.shape == b.input.shape
        )
    if isinstance(a, proto.InferResponse):
        return (
            a.inference_id == b.inference_id
            and a.output.tobytes() == b.output.tobytes()
            and a.output.shape == b.output.shape
            and a.commit == b.commit
        )
    return a == b


def test_round_trip_seeded_fuzz_10k():
    rng = np.random.default_rng(1234)
    for _ in range(10_000):
        msg = _random_message(rng)
        back, consumed = proto.decode(proto.encode(msg))
        assert consumed == len(proto.encode(msg))
        assert _messages_equal(msg, back), msg


def test_golden_frames():
    # these byte strings are normative; PROTOCOL.md quotes them verbatim
    assert proto.encode(proto.ErrorMessage(7, "x")).hex() == (
        "5653503107070000000000000007000100000078"
    )
    assert proto.encode(proto.SetupAck("full")).hex() == "5653503102010000000000000000"
    req = proto.InferRequest(2, "holistic", as_tensor([1.0]), 0.5)
    assert proto.encode(req).hex() == (
        "565350310319000000000000000200000000000000000000003f"
        "01000000010000000000803f"
    )
    vreq = proto.VerifyRequest(2, ((1, Region((0,), (3,))),))
    assert proto.encode(vreq).hex() == (
        "56535031051c000000000000000200000000000000010000000100000001000000"
        "0000000003000000"
    )
    commit = og.MerkleCommit(bytes(range(32)), 2, (bytes(range(32)),))
    resp = proto.InferResponse(2, as_tensor([3.0]), commit)
    assert proto.encode(resp).hex() == (
        "565350310460000000000000000200000000000000010000000100000000004040"
        + bytes(range(32)).hex()
        + "020000000000000001000000"
        + bytes(range(32)).hex()
    )


def test_frames_self_delimit():
    rng = np.random.default_rng(5)
    a, b = _random_message(rng), _random_message(rng)
    buf = proto.encode(a) + proto.encode(b)
    first, off = proto.decode(buf)
    second, end = proto.decode(buf, off)
    assert end == len(buf)
    assert _messages_equal(first, a) and _messages_equal(second, b)


def test_bad_magic():
    frame = bytearray(proto.encode(proto.SetupAck("full")))
    frame[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        proto.decode(bytes(frame))


def test_every_truncation_fails_cleanly():
    frame = proto.encode(proto.InferRequest(1, "holistic", as_tensor([1.0, 2.0]), 0.5))
    for n in range(len(frame)):
        with pytest.raises(ParseError):
            proto.decode_exactly_one(frame[:n])


def test_unknown_type_rejected_not_skipped():
    frame = bytearray(proto.encode(proto.SetupAck("full")))
    frame[4] = 0xEE
    with pytest.raises(UnknownTypeError):
        proto.decode(bytes(frame))


def test_length_overflow():
    frame = proto.MAGIC + bytes([proto.MsgType.ERROR]) + pack_u64(1 << 62)
    with pytest.raises(LengthOverflowError):
        proto.decode(frame)


def test_trailing_bytes_detected():
    frame = proto.encode(proto.SetupAck("full"))
    with pytest.raises(TrailingBytesError):
        proto.decode_exactly_one(frame + b"\x00")


def test_verify_ratio_validated_both_ways():
    with pytest.raises(DomainError):
        proto.InferRequest(0, "holistic", as_tensor([1.0]), 0.0)
    with pytest.raises(DomainError):
        proto.InferRequest(0, "holistic", as_tensor([1.0]), 1.5)
    good = bytearray(proto.encode(proto.InferRequest(0, "holistic", as_tensor([1.0]), 1.0)))
    # stamp an out-of-range ratio directly into the payload (offset: header 13 + id 8 + mode 1)
    good[13 + 9 : 13 + 13] = np.float32(2.0).tobytes()
    with pytest.raises(UnknownTypeError):
        proto.decode(bytes(good))


@given(st.integers(min_value=0, max_value=2**64 - 1), st.text(max_size=40))
def test_error_message_round_trip(code, text):
    msg = proto.ErrorMessage(code % 2**16, text)
    back, _ = proto.decode(proto.encode(msg))
    assert back == msg


def test_direct_session_version_check(mlp):
    core = og.WorkerCore()
    og.DirectSession(core)  # matching version is fine
    with pytest.raises(VersionMismatchError):
        og.DirectSession(core, version=2)


def test_tcp_handshake_and_version_refusal(mlp):
    import socket
    import threading

    from offguard.worker import serve

    core = og.WorkerCore()
    ready = {}
    evt = threading.Event()

    def cb(bound):
        ready["port"] = bound[1]
        evt.set()

    t = threading.Thread(target=serve, args=(core, "127.0.0.1", 0), kwargs={"ready_callback": cb}, daemon=True)
    t.start()
    assert evt.wait(5.0)
    port = ready["port"]

    session = og.TcpSession("127.0.0.1", port)
    from offguard.container import model_to_bytes

    ack = session.checked_request(proto.SetupModel("full", model_to_bytes(mlp)))
    assert isinstance(ack, proto.SetupAck)
    session.close()

    # wrong version byte: server answers with its version and hangs up
    raw = socket.create_connection(("127.0.0.1", port), timeout=5)
    raw.sendall(proto.MAGIC + bytes([9]))
    reply = raw.recv(5)
    assert reply == proto.MAGIC + bytes([proto.PROTOCOL_VERSION])
    assert raw.recv(1) == b""  # closed
    raw.close()


def test_transport_error_on_dead_peer():
    import socket

    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    import threading

    def drop():
        conn, _ = listener.accept()
        conn.close()

    t = threading.Thread(target=drop, daemon=True)
    t.start()
    with pytest.raises((TransportError, VersionMismatchError)):
        og.TcpSession("127.0.0.1", port)
    listener.close()
