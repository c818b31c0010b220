"""Input masking and two-worker weight shares.

Data privacy: before offloading a linear layer, add a one-time uniform
mask drawn from [-e, e] (e = k_scale * input range) to the input and keep
the precomputed product of the mask through the layer's linear part.
Subtracting that product from the worker's answer recovers the true
output; the bias is excluded from the precomputation because it cancels
in the subtraction.

Model confidentiality: split a parametric layer into two additive halves
(W + d)/2 and (W - d)/2 (and likewise for the bias) for two non-colluding
workers; summing their outputs cancels the mask terms.

Randomness: all draws come from numpy's Philox, a seedable 64-bit
counter-based generator, so every experiment is reproducible from its
seed. A deployment that needs unpredictability can swap in an
OS-entropy-seeded generator behind the same interface.

The closed-form estimators at the bottom quantify what a masked
disclosure leaks: a range-k uniform mask lets an observer distinguish two
candidate values with probability 2/(2k+1), hence up to 2n/(2k+1) of n
disclosed points. The finite-field analogue of this scheme has failure
rate exactly 0 (see analysis.PERFECT_FIELD_FAILURE_RATE); it is not a
compute path here because it abandons float arithmetic.

A single-worker variant that masks only the weights (ship W + d, have the
device subtract d*x afterwards) is deliberately not provided: the device
would still multiply d by x for every inference, which is the exact work
offloading is meant to remove.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DomainError,
    MaskStateError,
    OutOfMasksError,
    ShapeError,
    UnknownTypeError,
    UnsupportedLayerError,
)
from .nn import LayerKind, LayerSpec, forward_linear, layer_output_shape
from .tensor import Tensor, as_tensor, read_tensor, tensor_to_bytes
from .wire import Reader, pack_f64, pack_u16, pack_u32, pack_u64

_F32 = np.float32

_FRESH, _CONSUMED, _UNMASKED = 0, 1, 2


def rng_from_seed(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; (seed, stream) pairs give independent streams."""
    return np.random.Generator(np.random.Philox(key=(int(seed) & (1 << 64) - 1) | (int(stream) << 64)))


@dataclass
class Mask:
    mask_id: int
    epsilon: Tensor
    precomputed: Tensor
    state: int = _FRESH

    @property
    def consumed(self) -> bool:
        return self.state != _FRESH


@dataclass
class MaskSet:
    """A pool of one-time masks for one linear layer.

    Consumption is atomic: concurrent mask_input callers never receive the
    same mask id.
    """

    layer_index: int
    k_scale: float
    masks: list[Mask]
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def remaining(self) -> int:
        return sum(1 for m in self.masks if m.state == _FRESH)

    def _by_id(self, mask_id: int) -> Mask:
        for m in self.masks:
            if m.mask_id == mask_id:
                return m
        raise MaskStateError(f"unknown mask id {mask_id}")


def generate_masks(
    layer: LayerSpec,
    input_shape,
    count: int,
    k_scale: float,
    input_range: tuple[float, float],
    rng_seed: int,
    layer_index: int = 0,
) -> MaskSet:
    """Draw count fresh masks and precompute their linear-part products.

    Each epsilon is uniform on [-e, e] with e = k_scale * (max - min) of
    the declared input range. Mask generation runs outside the inference
    path; stockpile as many as idle time allows.
    """
    if not layer.is_linear:
        raise UnsupportedLayerError(
            f"cannot mask through {layer.kind.name}: masking only applies to linear operations"
        )
    lo, hi = float(input_range[0]), float(input_range[1])
    if not lo < hi:
        raise DomainError(f"input_range must satisfy min < max, got ({lo}, {hi})")
    if count < 0:
        raise DomainError("count must be >= 0")
    if k_scale < 0:
        raise DomainError("k_scale must be >= 0")
    input_shape = tuple(int(d) for d in input_shape)
    layer_output_shape(layer, input_shape, index=layer_index)

    eps_bound = k_scale * (hi - lo)
    rng = rng_from_seed(rng_seed)
    masks = []
    for i in range(count):
        eps = rng.uniform(-eps_bound, eps_bound, size=input_shape).astype(_F32)
        masks.append(Mask(mask_id=i, epsilon=eps, precomputed=forward_linear(layer, eps)))
    return MaskSet(layer_index=layer_index, k_scale=float(k_scale), masks=masks)


def mask_input(x: Tensor, mask_set: MaskSet) -> tuple[Tensor, int]:
    """Add the next unconsumed mask to x; returns (masked, mask_id)."""
    x = as_tensor(x)
    with mask_set._lock:
        for m in mask_set.masks:
            if m.state == _FRESH:
                if m.epsilon.shape != x.shape:
                    raise ShapeError(
                        f"input shape {x.shape} != mask shape {m.epsilon.shape}"
                    )
                m.state = _CONSUMED
                return (x + m.epsilon).astype(_F32, copy=False), m.mask_id
    raise OutOfMasksError(
        f"mask pool for layer {mask_set.layer_index} exhausted; pre-generate more masks"
    )


def unmask_output(y_masked: Tensor, mask_set: MaskSet, mask_id: int) -> Tensor:
    """Subtract the precomputed mask product from a worker's answer."""
    y_masked = as_tensor(y_masked)
    with mask_set._lock:
        m = mask_set._by_id(mask_id)
        if m.state == _FRESH:
            raise MaskStateError(f"mask {mask_id} was never consumed by mask_input")
        if m.state == _UNMASKED:
            raise MaskStateError(f"mask {mask_id} already unmasked; one-time masks cannot be reused")
        if m.precomputed.shape != y_masked.shape:
            raise ShapeError(
                f"result shape {y_masked.shape} != precomputed shape {m.precomputed.shape}"
            )
        m.state = _UNMASKED
        return (y_masked - m.precomputed).astype(_F32, copy=False)


@dataclass(frozen=True)
class WeightShares:
    share_plus: LayerSpec
    share_minus: LayerSpec
    delta_scale: float


def _uniform_like(rng, arr: Tensor, k_scale: float) -> Tensor:
    spread = float(arr.max() - arr.min())
    bound = k_scale * spread
    return rng.uniform(-bound, bound, size=arr.shape).astype(_F32)


def split_weights(layer: LayerSpec, k_scale: float, rng_seed: int) -> WeightShares:
    """Additive halves (P + d)/2 and (P - d)/2 of a parametric layer.

    d (and the bias mask) is uniform on +-k_scale times the parameter's own
    value spread, so a parameter tensor with zero spread gets a zero mask.
    """
    if not layer.has_params:
        raise UnsupportedLayerError(
            f"{layer.kind.name} has no parameters to split"
        )
    if k_scale < 0:
        raise DomainError("k_scale must be >= 0")
    rng = rng_from_seed(rng_seed)
    if layer.kind == LayerKind.DENSE:
        delta = _uniform_like(rng, layer.weights, k_scale)
        beta = _uniform_like(rng, layer.bias, k_scale)
        plus = LayerSpec(
            LayerKind.DENSE,
            weights=((layer.weights + delta) / 2).astype(_F32),
            bias=((layer.bias + beta) / 2).astype(_F32),
        )
        minus = LayerSpec(
            LayerKind.DENSE,
            weights=((layer.weights - delta) / 2).astype(_F32),
            bias=((layer.bias - beta) / 2).astype(_F32),
        )
    else:
        delta = _uniform_like(rng, layer.kernels, k_scale)
        beta = _uniform_like(rng, layer.bias, k_scale)
        plus = LayerSpec(
            LayerKind.CONV2D,
            kernels=((layer.kernels + delta) / 2).astype(_F32),
            bias=((layer.bias + beta) / 2).astype(_F32),
            stride=layer.stride,
            padding=layer.padding,
        )
        minus = LayerSpec(
            LayerKind.CONV2D,
            kernels=((layer.kernels - delta) / 2).astype(_F32),
            bias=((layer.bias - beta) / 2).astype(_F32),
            stride=layer.stride,
            padding=layer.padding,
        )
    return WeightShares(share_plus=plus, share_minus=minus, delta_scale=float(k_scale))


def combine_shares(y1: Tensor, y2: Tensor) -> Tensor:
    """Sum the two share-workers' outputs; mask terms cancel."""
    y1, y2 = as_tensor(y1), as_tensor(y2)
    if y1.shape != y2.shape:
        raise ShapeError(f"share outputs differ in shape: {y1.shape} vs {y2.shape}")
    return (y1 + y2).astype(_F32, copy=False)


# ---------------------------------------------------------------------------
# closed-form leakage estimators


def masking_failure_rate(k: float) -> float:
    """Probability that a range-k mask fails to hide which of two values
    was disclosed: 2/(2k+1). Defined for k >= 1."""
    if k < 1:
        raise DomainError(f"failure rate requires k >= 1, got {k}")
    return 2.0 / (2.0 * k + 1.0)


def expected_leak_count(n: int, k: float) -> float:
    """Expected number of the n masked points an observer can pin down."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return n * masking_failure_rate(k)


# ---------------------------------------------------------------------------
# persistence (format in PROTOCOL.md)

MASKSET_MAGIC = b"VSMK"
MASKSET_VERSION = 1


def _pack_bitmap(bits: list[bool]) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def _unpack_bitmap(raw: bytes, n: int) -> list[bool]:
    return [bool(raw[i // 8] >> (i % 8) & 1) for i in range(n)]


def mask_set_to_bytes(mask_set: MaskSet) -> bytes:
    out = bytearray(MASKSET_MAGIC)
    out += pack_u16(MASKSET_VERSION)
    out += pack_u32(mask_set.layer_index)
    out += pack_f64(mask_set.k_scale)
    out += pack_u32(len(mask_set.masks))
    out += _pack_bitmap([m.state != _FRESH for m in mask_set.masks])
    out += _pack_bitmap([m.state == _UNMASKED for m in mask_set.masks])
    for m in mask_set.masks:
        out += pack_u64(m.mask_id)
        out += tensor_to_bytes(m.epsilon)
        out += tensor_to_bytes(m.precomputed)
    return bytes(out)


def mask_set_from_bytes(buf: bytes) -> MaskSet:
    r = Reader(buf)
    if r.take(4) != MASKSET_MAGIC:
        raise BadMagicError("not a mask pool file")
    version = r.u16()
    if version != MASKSET_VERSION:
        raise UnknownTypeError(f"unsupported mask pool version {version}")
    layer_index = r.u32()
    k_scale = r.f64()
    n = r.u32()
    consumed = _unpack_bitmap(r.take((n + 7) // 8), n)
    unmasked = _unpack_bitmap(r.take((n + 7) // 8), n)
    masks = []
    for i in range(n):
        mask_id = r.u64()
        eps = read_tensor(r)
        pre = read_tensor(r)
        state = _UNMASKED if unmasked[i] else (_CONSUMED if consumed[i] else _FRESH)
        masks.append(Mask(mask_id, eps, pre, state))
    r.expect_end()
    return MaskSet(layer_index=layer_index, k_scale=k_scale, masks=masks)


def save_mask_set(path, mask_set: MaskSet) -> None:
    with open(path, "wb") as f:
        f.write(mask_set_to_bytes(mask_set))


def load_mask_set(path) -> MaskSet:
    with open(path, "rb") as f:
        return mask_set_from_bytes(f.read())
