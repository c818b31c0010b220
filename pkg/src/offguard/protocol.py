"""Client/worker wire protocol.

Frame layout (all integers little-endian):

    "VSP1" | u8 msg_type | u64 payload_length | payload

decode() is total over arbitrary bytes: bad magic, truncation, unknown
types and absurd lengths each raise their own ParseError subclass, and a
frame followed by another frame decodes cleanly one at a time, so frames
self-delimit on a reliable stream. The full grammar with golden hex dumps
is in PROTOCOL.md.

Sessions start with a 5-byte handshake in each direction ("VSP1" + u8
version); a version mismatch refuses the session before any frame flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .commitment import HASH_LEN, MerkleCommit
from .errors import (
    BadMagicError,
    DomainError,
    LengthOverflowError,
    TruncatedError,
    UnknownTypeError,
)
from .geometry import Region
from .tensor import Tensor, read_tensor, tensor_to_bytes
from .wire import MAX_DECLARED_LENGTH, Reader, pack_f32, pack_u8, pack_u16, pack_u32, pack_u64

MAGIC = b"VSP1"
PROTOCOL_VERSION = 1
HEADER_LEN = 4 + 1 + 8


class MsgType(IntEnum):
    SETUP_MODEL = 1
    SETUP_ACK = 2
    INFER_REQUEST = 3
    INFER_RESPONSE = 4
    VERIFY_REQUEST = 5
    VERIFY_RESPONSE = 6
    ERROR = 7


class ErrorCode(IntEnum):
    BAD_REQUEST = 1
    ROLE_MISMATCH = 2
    SHAPE_MISMATCH = 3
    UNKNOWN_INFERENCE = 4
    EVICTED = 5
    MALFORMED = 6
    INTERNAL = 7


ROLE_FULL = "full"
ROLE_SHARE_PLUS = "share_plus"
ROLE_SHARE_MINUS = "share_minus"
ROLE_SINGLE_LAYER = "single_layer"

_ROLE_BYTE = {ROLE_FULL: 0, ROLE_SHARE_PLUS: 1, ROLE_SHARE_MINUS: 2, ROLE_SINGLE_LAYER: 3}
_ROLE_NAME = {v: k for k, v in _ROLE_BYTE.items()}

MODE_HOLISTIC = "holistic"
MODE_LAYER = "layer"


@dataclass(frozen=True)
class SetupModel:
    role: str
    model_bytes: bytes
    layer_index: int | None = None  # only for single_layer role

    def __post_init__(self):
        if self.role not in _ROLE_BYTE:
            raise DomainError(f"unknown role {self.role!r}")
        if (self.role == ROLE_SINGLE_LAYER) != (self.layer_index is not None):
            raise DomainError("layer_index is set iff role is single_layer")


@dataclass(frozen=True)
class SetupAck:
    role: str


@dataclass(frozen=True)
class InferRequest:
    inference_id: int
    mode: str
    input: Tensor
    verify_ratio: float
    layer_index: int | None = None  # only for layer mode

    def __post_init__(self):
        if self.mode not in (MODE_HOLISTIC, MODE_LAYER):
            raise DomainError(f"unknown mode {self.mode!r}")
        if (self.mode == MODE_LAYER) != (self.layer_index is not None):
            raise DomainError("layer_index is set iff mode is layer")
        if not (0.0 < self.verify_ratio <= 1.0):
            raise DomainError(f"verify_ratio must be in (0, 1], got {self.verify_ratio}")


@dataclass(frozen=True)
class InferResponse:
    inference_id: int
    output: Tensor
    commit: MerkleCommit


@dataclass(frozen=True)
class VerifyRequest:
    inference_id: int
    regions: tuple[tuple[int, Region], ...]


@dataclass(frozen=True)
class VerifyResponse:
    inference_id: int
    proof_bytes: bytes


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    text: str


Message = SetupModel | SetupAck | InferRequest | InferResponse | VerifyRequest | VerifyResponse | ErrorMessage


# ---------------------------------------------------------------------------
# payload codecs


def _encode_region(region: Region) -> bytes:
    out = bytearray(pack_u32(region.rank))
    for o, e in zip(region.offset, region.extent):
        out += pack_u32(o)
        out += pack_u32(e)
    return bytes(out)


def _read_region(r: Reader) -> Region:
    rank = r.u32()
    if rank == 0 or rank > 32:
        raise UnknownTypeError(f"bad region rank {rank}")
    offs, exts = [], []
    for _ in range(rank):
        offs.append(r.u32())
        exts.append(r.u32())
    return Region(tuple(offs), tuple(exts))


def _encode_commit(commit: MerkleCommit) -> bytes:
    out = bytearray(commit.root)
    out += pack_u64(commit.leaf_count)
    out += pack_u32(len(commit.layer_roots))
    for h in commit.layer_roots:
        out += h
    return bytes(out)


def _read_commit(r: Reader) -> MerkleCommit:
    root = r.take(HASH_LEN)
    leaf_count = r.u64()
    n = r.u32()
    roots = tuple(r.take(HASH_LEN) for _ in range(n))
    return MerkleCommit(root, leaf_count, roots)


def _payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, SetupModel):
        out = bytearray(pack_u8(_ROLE_BYTE[msg.role]))
        if msg.role == ROLE_SINGLE_LAYER:
            out += pack_u32(msg.layer_index)
        out += pack_u64(len(msg.model_bytes))
        out += msg.model_bytes
        return MsgType.SETUP_MODEL, bytes(out)
    if isinstance(msg, SetupAck):
        return MsgType.SETUP_ACK, pack_u8(_ROLE_BYTE[msg.role])
    if isinstance(msg, InferRequest):
        out = bytearray(pack_u64(msg.inference_id))
        if msg.mode == MODE_HOLISTIC:
            out += pack_u8(0)
        else:
            out += pack_u8(1)
            out += pack_u32(msg.layer_index)
        out += pack_f32(msg.verify_ratio)
        out += tensor_to_bytes(msg.input)
        return MsgType.INFER_REQUEST, bytes(out)
    if isinstance(msg, InferResponse):
        out = bytearray(pack_u64(msg.inference_id))
        out += tensor_to_bytes(msg.output)
        out += _encode_commit(msg.commit)
        return MsgType.INFER_RESPONSE, bytes(out)
    if isinstance(msg, VerifyRequest):
        out = bytearray(pack_u64(msg.inference_id))
        out += pack_u32(len(msg.regions))
        for ii, region in msg.regions:
            out += pack_u32(ii)
            out += _encode_region(region)
        return MsgType.VERIFY_REQUEST, bytes(out)
    if isinstance(msg, VerifyResponse):
        out = bytearray(pack_u64(msg.inference_id))
        out += pack_u64(len(msg.proof_bytes))
        out += msg.proof_bytes
        return MsgType.VERIFY_RESPONSE, bytes(out)
    if isinstance(msg, ErrorMessage):
        text = msg.text.encode("utf-8")
        return MsgType.ERROR, pack_u16(msg.code) + pack_u32(len(text)) + text
    raise UnknownTypeError(f"cannot encode {type(msg).__name__}")


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    r = Reader(payload)
    if msg_type == MsgType.SETUP_MODEL:
        role_b = r.u8()
        if role_b not in _ROLE_NAME:
            raise UnknownTypeError(f"unknown role byte {role_b}")
        role = _ROLE_NAME[role_b]
        layer_index = r.u32() if role == ROLE_SINGLE_LAYER else None
        ln = r.u64()
        if ln > MAX_DECLARED_LENGTH:
            raise LengthOverflowError(f"model container of {ln} bytes")
        msg = SetupModel(role, r.take(ln), layer_index)
    elif msg_type == MsgType.SETUP_ACK:
        role_b = r.u8()
        if role_b not in _ROLE_NAME:
            raise UnknownTypeError(f"unknown role byte {role_b}")
        msg = SetupAck(_ROLE_NAME[role_b])
    elif msg_type == MsgType.INFER_REQUEST:
        inference_id = r.u64()
        mode_b = r.u8()
        if mode_b == 0:
            mode, layer_index = MODE_HOLISTIC, None
        elif mode_b == 1:
            mode, layer_index = MODE_LAYER, r.u32()
        else:
            raise UnknownTypeError(f"unknown mode byte {mode_b}")
        ratio = r.f32()
        if not (0.0 < ratio <= 1.0):
            raise UnknownTypeError(f"verify_ratio {ratio} outside (0, 1]")
        msg = InferRequest(inference_id, mode, read_tensor(r), ratio, layer_index)
    elif msg_type == MsgType.INFER_RESPONSE:
        inference_id = r.u64()
        output = read_tensor(r)
        msg = InferResponse(inference_id, output, _read_commit(r))
    elif msg_type == MsgType.VERIFY_REQUEST:
        inference_id = r.u64()
        n = r.u32()
        regions = tuple((r.u32(), _read_region(r)) for _ in range(n))
        msg = VerifyRequest(inference_id, regions)
    elif msg_type == MsgType.VERIFY_RESPONSE:
        inference_id = r.u64()
        ln = r.u64()
        if ln > MAX_DECLARED_LENGTH:
            raise LengthOverflowError(f"proof of {ln} bytes")
        msg = VerifyResponse(inference_id, r.take(ln))
    elif msg_type == MsgType.ERROR:
        code = r.u16()
        ln = r.u32()
        msg = ErrorMessage(code, r.take(ln).decode("utf-8", errors="replace"))
    else:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    r.expect_end()
    return msg


# ---------------------------------------------------------------------------
# framing


def encode(msg: Message) -> bytes:
    msg_type, payload = _payload(msg)
    if len(payload) > MAX_DECLARED_LENGTH:
        raise LengthOverflowError(f"payload of {len(payload)} bytes")
    return MAGIC + pack_u8(msg_type) + pack_u64(len(payload)) + payload


def decode(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at offset; returns (message, next offset).

    Never consumes past the decoded frame, so concatenated frames decode
    one at a time.
    """
    r = Reader(buf, offset)
    if r.remaining() < HEADER_LEN:
        raise TruncatedError(f"frame header needs {HEADER_LEN} bytes, have {r.remaining()}")
    if r.take(4) != MAGIC:
        raise BadMagicError("bad frame magic")
    msg_type = r.u8()
    if msg_type not in MsgType._value2member_map_:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    ln = r.u64()
    if ln > MAX_DECLARED_LENGTH:
        raise LengthOverflowError(f"declared payload of {ln} bytes")
    payload = r.take(ln)
    return _decode_payload(msg_type, payload), r.pos


def decode_exactly_one(buf: bytes) -> Message:
    msg, end = decode(buf)
    if end != len(buf):
        from .errors import TrailingBytesError

        raise TrailingBytesError(f"{len(buf) - end} bytes after frame")
    return msg
