"""Minimal float32 feed-forward engine.

Layers: Dense, Conv2D (cross-correlation, valid/same padding), ReLU,
Flatten, Softmax. Every layer can be evaluated in isolation, including on
a sub-region of its output, so a verifier can recompute any committed
piece of an inference.

Determinism contract: all arithmetic is float32 and each kernel performs
its reduction in a single numpy call with a fixed traversal order, so
repeated evaluation of the same layer on the same machine and build is
bit-identical. Cross-machine comparison must use tolerances, never bit
equality; only the hash layer relies on exact bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ShapeError, UnsupportedLayerError
from .geometry import Region, check_region, whole_region
from .tensor import Tensor, as_tensor, validate_shape

_F32 = np.float32


class LayerKind(IntEnum):
    DENSE = 0
    CONV2D = 1
    RELU = 2
    FLATTEN = 3
    SOFTMAX = 4


PADDING_VALID = "valid"
PADDING_SAME = "same"

# Layers whose output is an affine function of their input. Masking and
# weight-sharing only apply to these.
_LINEAR_KINDS = frozenset({LayerKind.DENSE, LayerKind.CONV2D, LayerKind.FLATTEN})


@dataclass
class LayerSpec:
    kind: LayerKind
    weights: Tensor | None = None  # Dense: (out, in)
    bias: Tensor | None = None  # Dense: (out,), Conv2D: (out_ch,)
    kernels: Tensor | None = None  # Conv2D: (kh, kw, in_ch, out_ch)
    stride: int = 1
    padding: str = PADDING_VALID

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if self.kind == LayerKind.DENSE:
            if self.weights is None or self.bias is None:
                raise ShapeError("dense layer needs weights and bias")
            self.weights = as_tensor(self.weights)
            self.bias = as_tensor(self.bias)
            if self.weights.ndim != 2 or self.bias.ndim != 1:
                raise ShapeError("dense expects 2-d weights and 1-d bias")
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError(
                    f"dense bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
                )
        elif self.kind == LayerKind.CONV2D:
            if self.kernels is None or self.bias is None:
                raise ShapeError("conv2d layer needs kernels and bias")
            self.kernels = as_tensor(self.kernels)
            self.bias = as_tensor(self.bias)
            if self.kernels.ndim != 4 or self.bias.ndim != 1:
                raise ShapeError("conv2d expects 4-d kernels and 1-d bias")
            if self.bias.shape[0] != self.kernels.shape[3]:
                raise ShapeError(
                    f"conv2d bias length {self.bias.shape[0]} != out channels {self.kernels.shape[3]}"
                )
            if self.stride < 1:
                raise ShapeError("stride must be >= 1")
            if self.padding not in (PADDING_VALID, PADDING_SAME):
                raise ShapeError(f"unknown padding {self.padding!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind in _LINEAR_KINDS

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.CONV2D)

    @property
    def sliceable(self) -> bool:
        # Softmax couples every output to every input, so its tensors are
        # committed as one whole-tensor unit.
        return self.kind != LayerKind.SOFTMAX


def dense(weights, bias) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, weights=as_tensor(weights), bias=as_tensor(bias))


def conv2d(kernels, bias, stride: int = 1, padding: str = PADDING_VALID) -> LayerSpec:
    return LayerSpec(
        LayerKind.CONV2D,
        kernels=as_tensor(kernels),
        bias=as_tensor(bias),
        stride=stride,
        padding=padding,
    )


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def softmax() -> LayerSpec:
    return LayerSpec(LayerKind.SOFTMAX)


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.input_shape = validate_shape(self.input_shape)
        # Raises at construction if consecutive layers are incompatible.
        infer_shapes(self)


def _shape_err(index: int | None, expected, got) -> ShapeError:
    where = "input" if index is None else f"layer {index}"
    return ShapeError(f"{where}: expected shape {tuple(expected)}, got {tuple(got)}")


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, ...], index: int | None = None):
    """Shape inference for a single layer; validates the input shape."""
    in_shape = tuple(in_shape)
    k = layer.kind
    if k == LayerKind.DENSE:
        out_n, in_n = layer.weights.shape
        if in_shape != (in_n,):
            raise _shape_err(index, (in_n,), in_shape)
        return (out_n,)
    if k == LayerKind.CONV2D:
        if len(in_shape) != 3:
            raise _shape_err(index, ("H", "W", layer.kernels.shape[2]), in_shape)
        h, w, c = in_shape
        kh, kw, c_in, c_out = layer.kernels.shape
        if c != c_in:
            raise _shape_err(index, (h, w, c_in), in_shape)
        s = layer.stride
        if layer.padding == PADDING_VALID:
            if h < kh or w < kw:
                raise _shape_err(index, (f">={kh}", f">={kw}", c_in), in_shape)
            return ((h - kh) // s + 1, (w - kw) // s + 1, c_out)
        return (math.ceil(h / s), math.ceil(w / s), c_out)
    if k in (LayerKind.RELU, LayerKind.SOFTMAX):
        return in_shape
    if k == LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    raise UnsupportedLayerError(f"unknown layer kind {k}")


def infer_shapes(model: ModelSpec) -> list[tuple[int, ...]]:
    """Shapes of every intermediate (input first), without touching data."""
    shapes = [tuple(model.input_shape)]
    for i, layer in enumerate(model.layers):
        shapes.append(layer_output_shape(layer, shapes[-1], index=i))
    return shapes


def _same_pad_top_left(in_dim: int, k: int, s: int) -> int:
    out = math.ceil(in_dim / s)
    total = max((out - 1) * s + k - in_dim, 0)
    return total // 2


def _conv_forward(layer: LayerSpec, x: Tensor) -> Tensor:
    h, w, _ = x.shape
    kh, kw, _, c_out = layer.kernels.shape
    s = layer.stride
    if layer.padding == PADDING_SAME:
        pt = _same_pad_top_left(h, kh, s)
        pl = _same_pad_top_left(w, kw, s)
        out_h, out_w = math.ceil(h / s), math.ceil(w / s)
        pad_h = max((out_h - 1) * s + kh - h, 0)
        pad_w = max((out_w - 1) * s + kw - w, 0)
        x = np.pad(x, ((pt, pad_h - pt), (pl, pad_w - pl), (0, 0)))
    else:
        out_h, out_w = (h - kh) // s + 1, (w - kw) // s + 1
    out = np.zeros((out_h, out_w, c_out), dtype=_F32)
    kern = layer.kernels
    for i in range(out_h):
        for j in range(out_w):
            window = x[i * s : i * s + kh, j * s : j * s + kw, :]
            out[i, j, :] = np.einsum("ijc,ijco->o", window, kern)
    return out


def forward_linear(layer: LayerSpec, x: Tensor, index: int | None = None) -> Tensor:
    """The linear part of a layer: Wx for dense, bias-free conv, reshape.

    Mask precomputation goes through here; the bias must stay out because
    it cancels when the precomputed product is subtracted from a masked
    result.
    """
    if not layer.is_linear:
        raise UnsupportedLayerError(f"{layer.kind.name} is not linear; masking only applies to linear operations")
    layer_output_shape(layer, x.shape, index=index)
    if layer.kind == LayerKind.DENSE:
        return (layer.weights @ x).astype(_F32, copy=False)
    if layer.kind == LayerKind.FLATTEN:
        return np.ascontiguousarray(x.reshape(-1))
    return _conv_forward(layer, x)


def forward_layer(layer: LayerSpec, x: Tensor, index: int | None = None) -> Tensor:
    """Evaluate one layer. Raises ShapeError naming the layer on mismatch."""
    x = as_tensor(x)
    layer_output_shape(layer, x.shape, index=index)
    k = layer.kind
    if k == LayerKind.DENSE:
        return ((layer.weights @ x) + layer.bias).astype(_F32, copy=False)
    if k == LayerKind.CONV2D:
        return _conv_forward(layer, x) + layer.bias
    if k == LayerKind.RELU:
        return np.maximum(x, _F32(0.0))
    if k == LayerKind.FLATTEN:
        return np.ascontiguousarray(x.reshape(-1))
    # Softmax, stabilised by subtracting the max before exponentiating.
    shifted = x - np.max(x)
    e = np.exp(shifted)
    return (e / np.sum(e)).astype(_F32, copy=False)


def forward_model(model: ModelSpec, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Full forward pass returning (output, all intermediates).

    The intermediates list is the model input followed by every layer
    output, so a model with L layers yields L + 1 tensors; these are
    exactly the tensors an inference commitment covers.
    """
    x = as_tensor(x)
    if tuple(x.shape) != tuple(model.input_shape):
        raise _shape_err(None, model.input_shape, x.shape)
    intermediates = [x]
    for i, layer in enumerate(model.layers):
        intermediates.append(forward_layer(layer, intermediates[-1], index=i))
    return intermediates[-1], intermediates


def receptive_region(layer: LayerSpec, out_region: Region, in_shape: tuple[int, ...]) -> Region:
    """Smallest axis-aligned input region needed to recompute out_region.

    Conv regions are clipped to the tensor bounds; recomputation zero-fills
    the clipped-away border when the layer uses same-padding.
    """
    in_shape = tuple(in_shape)
    k = layer.kind
    if k in (LayerKind.DENSE, LayerKind.SOFTMAX):
        return whole_region(in_shape)
    if k == LayerKind.RELU:
        return out_region
    if k == LayerKind.FLATTEN:
        if len(in_shape) == 1:
            return out_region
        row = int(np.prod(in_shape[1:]))
        start, ext = out_region.offset[0], out_region.extent[0]
        r0 = start // row
        r1 = (start + ext - 1) // row
        return Region(
            (r0,) + tuple(0 for _ in in_shape[1:]),
            (r1 - r0 + 1,) + tuple(in_shape[1:]),
        )
    # Conv2D
    h, w, c = in_shape
    kh, kw, _, _ = layer.kernels.shape
    s = layer.stride
    pt = _same_pad_top_left(h, kh, s) if layer.padding == PADDING_SAME else 0
    pl = _same_pad_top_left(w, kw, s) if layer.padding == PADDING_SAME else 0
    (r0, c0, _), (re, ce, _) = out_region.offset, out_region.extent
    top = max(r0 * s - pt, 0)
    left = max(c0 * s - pl, 0)
    bottom = min((r0 + re - 1) * s - pt + kh, h)
    right = min((c0 + ce - 1) * s - pl + kw, w)
    return Region((top, left, 0), (bottom - top, right - left, c))


def forward_region(
    layer: LayerSpec,
    in_patch: Tensor,
    in_region: Region,
    out_region: Region,
    in_shape: tuple[int, ...],
) -> Tensor:
    """Recompute just out_region of a layer from an input patch.

    in_patch holds the values of in_region (which must cover
    receptive_region(layer, out_region, in_shape)). Returns an array of
    out_region's extent, computed with the same kernels as forward_layer.
    """
    in_shape = tuple(in_shape)
    check_region(in_region, in_shape)
    need = receptive_region(layer, out_region, in_shape)
    if not _covers(in_region, need):
        raise ShapeError(f"input region {in_region} does not cover receptive region {need}")
    k = layer.kind
    if k == LayerKind.DENSE:
        full = _paste(in_patch, in_region, in_shape)
        y = ((layer.weights @ full) + layer.bias).astype(_F32, copy=False)
        return y[out_region.slices()[0]]
    if k == LayerKind.SOFTMAX:
        full = _paste(in_patch, in_region, in_shape)
        return forward_layer(layer, full)[out_region.slices()]
    if k == LayerKind.RELU:
        rel = tuple(
            slice(o - io, o - io + e)
            for o, e, io in zip(out_region.offset, out_region.extent, in_region.offset)
        )
        return np.maximum(in_patch[rel], _F32(0.0))
    if k == LayerKind.FLATTEN:
        flat = np.ascontiguousarray(in_patch.reshape(-1))
        first_flat = int(np.ravel_multi_index(in_region.offset, in_shape))
        start = out_region.offset[0] - first_flat
        return flat[start : start + out_region.extent[0]]
    # Conv2D: evaluate each output position from the patch, zero-filling
    # same-padding positions that fall outside the real tensor.
    h, w, _ = in_shape
    kh, kw, _, c_out = layer.kernels.shape
    s = layer.stride
    pt = _same_pad_top_left(h, kh, s) if layer.padding == PADDING_SAME else 0
    pl = _same_pad_top_left(w, kw, s) if layer.padding == PADDING_SAME else 0
    (r0, c0, ch0), (re, ce, che) = out_region.offset, out_region.extent
    out = np.zeros((re, ce, c_out), dtype=_F32)
    kern = layer.kernels
    for i in range(re):
        for j in range(ce):
            top = (r0 + i) * s - pt
            left = (c0 + j) * s - pl
            window = np.zeros((kh, kw, in_shape[2]), dtype=_F32)
            rt, rb = max(top, 0), min(top + kh, h)
            cl, cr = max(left, 0), min(left + kw, w)
            if rb > rt and cr > cl:
                window[rt - top : rb - top, cl - left : cr - left, :] = in_patch[
                    rt - in_region.offset[0] : rb - in_region.offset[0],
                    cl - in_region.offset[1] : cr - in_region.offset[1],
                    :,
                ]
            out[i, j, :] = np.einsum("ijc,ijco->o", window, kern) + layer.bias
    return out[:, :, ch0 : ch0 + che]


def _covers(outer: Region, inner: Region) -> bool:
    from .geometry import region_contains

    return region_contains(outer, inner)


def _paste(patch: Tensor, region: Region, shape: tuple[int, ...]) -> Tensor:
    if region == whole_region(shape):
        return patch
    full = np.zeros(shape, dtype=_F32)
    full[region.slices()] = patch
    return full
