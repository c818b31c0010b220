"""Binary container formats for models and mask pools.

Model container ("VSML"):

    "VSML" | u16 version=1 | input shape (u32 rank, u32 dims...) |
    u32 layer count | per layer: u8 kind, then kind-specific fields:
        dense   : weights tensor, bias tensor
        conv2d  : u32 stride, u8 padding (0 valid, 1 same),
                  kernels tensor, bias tensor
        relu / flatten / softmax : nothing

Tensors use the shared encoding from tensor.py. Byte-level examples live
in PROTOCOL.md.
"""

from __future__ import annotations

from .errors import BadMagicError, UnknownTypeError
from .nn import (
    PADDING_SAME,
    PADDING_VALID,
    LayerKind,
    LayerSpec,
    ModelSpec,
    conv2d,
    dense,
    flatten,
    relu,
    softmax,
)
from .tensor import read_tensor, tensor_to_bytes
from .wire import Reader, pack_u8, pack_u16, pack_u32

MODEL_MAGIC = b"VSML"
MODEL_VERSION = 1

_PADDING_BYTE = {PADDING_VALID: 0, PADDING_SAME: 1}
_PADDING_NAME = {0: PADDING_VALID, 1: PADDING_SAME}


def _encode_shape(shape) -> bytes:
    out = bytearray(pack_u32(len(shape)))
    for d in shape:
        out += pack_u32(d)
    return bytes(out)


def _read_shape(r: Reader) -> tuple[int, ...]:
    rank = r.u32()
    return tuple(r.u32() for _ in range(rank))


def model_to_bytes(model: ModelSpec) -> bytes:
    out = bytearray(MODEL_MAGIC)
    out += pack_u16(MODEL_VERSION)
    out += _encode_shape(model.input_shape)
    out += pack_u32(len(model.layers))
    for layer in model.layers:
        out += pack_u8(int(layer.kind))
        if layer.kind == LayerKind.DENSE:
            out += tensor_to_bytes(layer.weights)
            out += tensor_to_bytes(layer.bias)
        elif layer.kind == LayerKind.CONV2D:
            out += pack_u32(layer.stride)
            out += pack_u8(_PADDING_BYTE[layer.padding])
            out += tensor_to_bytes(layer.kernels)
            out += tensor_to_bytes(layer.bias)
    return bytes(out)


def model_from_bytes(buf: bytes) -> ModelSpec:
    r = Reader(buf)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagicError("not a model container")
    version = r.u16()
    if version != MODEL_VERSION:
        raise UnknownTypeError(f"unsupported model container version {version}")
    input_shape = _read_shape(r)
    n_layers = r.u32()
    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        kind = r.u8()
        if kind == LayerKind.DENSE:
            w = read_tensor(r)
            b = read_tensor(r)
            layers.append(dense(w, b))
        elif kind == LayerKind.CONV2D:
            stride = r.u32()
            pad = r.u8()
            if pad not in _PADDING_NAME:
                raise UnknownTypeError(f"unknown padding byte {pad}")
            k = read_tensor(r)
            b = read_tensor(r)
            layers.append(conv2d(k, b, stride=stride, padding=_PADDING_NAME[pad]))
        elif kind == LayerKind.RELU:
            layers.append(relu())
        elif kind == LayerKind.FLATTEN:
            layers.append(flatten())
        elif kind == LayerKind.SOFTMAX:
            layers.append(softmax())
        else:
            raise UnknownTypeError(f"unknown layer kind byte {kind}")
    r.expect_end()
    return ModelSpec(layers, input_shape)


def save_model(path, model: ModelSpec) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> ModelSpec:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
