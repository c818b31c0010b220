"""Verify-unit slicing and the two-level inference commitment tree.

Every intermediate tensor of an inference is tiled into disjoint
"verify units" (slice_layout). Unit contents are hashed into leaves, each
intermediate gets a subtree, and the subtree roots are reduced a second
time into a single 32-byte commitment for the whole inference. Opening
proofs carry unit bytes plus sibling paths to that root.

Hashing is SHA-256 with one-byte domain separation (0x00 leaf, 0x01
internal) so a leaf can never be re-interpreted as an internal node. An
odd node at any tree level is promoted unchanged to the next level.

Leaves commit to exact serialized bytes. Whether those bytes are the
*correct* layer values is a separate, tolerance-based recomputation check
on the verifier side: hashes bind what the worker claimed, recomputation
decides whether the claim is right.

Alternative not taken: overlapping ("continuous") units, one per possible
window position, would let a verifier open any region without pulling in
neighbours, but the unit count - and with it the hashing work in every
commit - grows with the product of the window positions instead of the
tensor size. Disjoint tiling keeps commits cheap and pays only by
occasionally opening a few neighbouring units of a straddling request.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, LayoutError, MalformedProofError
from .geometry import Region, check_region, regions_overlap, whole_region
from .tensor import Tensor
from .wire import Reader, pack_u32, pack_u64

HASH_LEN = 32
_LEAF_TAG = b"\x00"
_NODE_TAG = b"\x01"


# ---------------------------------------------------------------------------
# slicing


@dataclass(frozen=True)
class UnitLayout:
    tensor_shape: tuple[int, ...]
    verify_ratio: float
    sliceable: bool
    units: tuple[Region, ...]

    def __len__(self) -> int:
        return len(self.units)

    def covering_units(self, region: Region) -> list[int]:
        """Indices of the minimal unit set whose union covers region."""
        check_region(region, self.tensor_shape)
        return [i for i, u in enumerate(self.units) if regions_overlap(u, region)]


def _segments_spread(dim: int, parts: int) -> list[tuple[int, int]]:
    """parts segments; remainder spread one element each over the leading ones."""
    base, rem = divmod(dim, parts)
    out, pos = [], 0
    for i in range(parts):
        ext = base + (1 if i < rem else 0)
        out.append((pos, ext))
        pos += ext
    return out


def _segments_last_absorbs(dim: int, parts: int) -> list[tuple[int, int]]:
    """parts segments of floor(dim/parts); the last absorbs the remainder."""
    base = dim // parts
    out = []
    for i in range(parts):
        off = i * base
        ext = base if i < parts - 1 else dim - off
        out.append((off, ext))
    return out


def slice_layout(shape, verify_ratio: float, sliceable: bool) -> UnitLayout:
    """Tile a tensor with >= ceil(1/verify_ratio) disjoint units when possible.

    Rank-1 tensors split their single axis into ceil(1/ratio) segments with
    the remainder spread over the leading segments. Higher ranks split the
    two leading (spatial) axes into f = ceil(sqrt(u)) segments each of base
    extent floor(dim/f), the final segment absorbing the remainder; trailing
    (channel) axes stay whole. An axis shorter than f falls back to one
    segment per element and the other axis compensates. The unit count can
    only fall short of ceil(1/ratio) when the sliced axes simply do not
    have that many elements.
    """
    shape = tuple(int(d) for d in shape)
    if not (0.0 < verify_ratio <= 1.0):
        raise DomainError(f"verify_ratio must be in (0, 1], got {verify_ratio}")
    if not sliceable or verify_ratio == 1.0:
        units = (whole_region(shape),)
        return UnitLayout(shape, verify_ratio, sliceable, units)

    u = math.ceil(1.0 / verify_ratio)
    if len(shape) == 1:
        parts = min(u, shape[0])
        segs = _segments_spread(shape[0], parts)
        units = tuple(Region((off,), (ext,)) for off, ext in segs)
        return UnitLayout(shape, verify_ratio, sliceable, units)

    d0, d1 = shape[0], shape[1]
    f = math.ceil(math.sqrt(u))
    f0, f1 = min(f, d0), min(f, d1)
    if f0 * f1 < u:
        f1 = min(math.ceil(u / f0), d1)
    if f0 * f1 < u:
        f0 = min(math.ceil(u / f1), d0)
    segs0 = _segments_last_absorbs(d0, f0)
    segs1 = _segments_last_absorbs(d1, f1)
    rest_off = tuple(0 for _ in shape[2:])
    rest_ext = tuple(shape[2:])
    units = tuple(
        Region((o0, o1) + rest_off, (e0, e1) + rest_ext)
        for o0, e0 in segs0
        for o1, e1 in segs1
    )
    return UnitLayout(shape, verify_ratio, sliceable, units)


def unit_bytes(tensor: Tensor, region: Region) -> bytes:
    """Row-major little-endian f32 serialization of one unit's elements."""
    view = tensor[region.slices()]
    return np.ascontiguousarray(view, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# hashing


def hash_unit(intermediate_index: int, unit_index: int, data: bytes) -> bytes:
    h = hashlib.sha256()
    h.update(_LEAF_TAG)
    h.update(pack_u32(intermediate_index))
    h.update(pack_u32(unit_index))
    h.update(data)
    return h.digest()


def _hash_node(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(_NODE_TAG + left + right).digest()


def _build_levels(leaves: list[bytes]) -> list[list[bytes]]:
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        nxt = []
        for i in range(0, len(prev) - 1, 2):
            nxt.append(_hash_node(prev[i], prev[i + 1]))
        if len(prev) % 2 == 1:
            nxt.append(prev[-1])  # odd node promoted unchanged
        levels.append(nxt)
    return levels


def _auth_path(levels: list[list[bytes]], index: int) -> list[tuple[bytes, bool]]:
    """(sibling, sibling_is_left) pairs from leaf to root; promotions add none."""
    path = []
    for level in levels[:-1]:
        if index % 2 == 0:
            if index + 1 < len(level):
                path.append((level[index + 1], False))
        else:
            path.append((level[index - 1], True))
        index //= 2
    return path


def _fold_path(leaf: bytes, path: list[tuple[bytes, bool]]) -> bytes:
    node = leaf
    for sibling, sibling_is_left in path:
        node = _hash_node(sibling, node) if sibling_is_left else _hash_node(node, sibling)
    return node


def intermediate_sliceable(model, index: int) -> bool:
    """Whether intermediate `index` of a model may be sliced into units.

    Tensors flowing into or out of a Softmax layer stay whole: checking any
    part of a softmax requires all of its inputs and outputs, so slicing
    them would buy nothing.
    """
    from .nn import LayerKind

    layers = model.layers
    if index > 0 and layers[index - 1].kind == LayerKind.SOFTMAX:
        return False
    if index < len(layers) and layers[index].kind == LayerKind.SOFTMAX:
        return False
    return True


def model_layouts(model, verify_ratio: float, layer_index: int | None = None) -> list[UnitLayout]:
    """Unit layouts for every intermediate of an inference.

    With layer_index set, the inference covers exactly that one layer and
    the intermediates are just its input and output.
    """
    from .nn import infer_shapes, layer_output_shape

    if layer_index is None:
        shapes = infer_shapes(model)
        flags = [intermediate_sliceable(model, i) for i in range(len(shapes))]
    else:
        layer = model.layers[layer_index]
        in_shape = infer_shapes(model)[layer_index]
        shapes = [in_shape, layer_output_shape(layer, in_shape, index=layer_index)]
        flags = [layer.sliceable, layer.sliceable]
    return [slice_layout(s, verify_ratio, f) for s, f in zip(shapes, flags)]


# ---------------------------------------------------------------------------
# commitment and proofs


@dataclass(frozen=True)
class MerkleCommit:
    root: bytes
    leaf_count: int
    layer_roots: tuple[bytes, ...]


@dataclass(frozen=True)
class OpenedUnit:
    intermediate_index: int
    unit_index: int
    data: bytes


@dataclass(frozen=True)
class MerkleProof:
    inference_id: int
    opened: tuple[OpenedUnit, ...]
    paths: tuple[tuple[tuple[bytes, bool], ...], ...]  # aligned with opened


def reduce_layer_roots(layer_roots) -> bytes:
    """Top-level reduction of per-intermediate roots into the commit root."""
    if not layer_roots:
        raise LayoutError("cannot commit to zero intermediates")
    return _build_levels(list(layer_roots))[-1][0]


def _check_layouts(intermediates: list[Tensor], layouts: list[UnitLayout]) -> None:
    if len(intermediates) != len(layouts):
        raise LayoutError(
            f"{len(intermediates)} intermediates but {len(layouts)} layouts"
        )
    for t, layout in zip(intermediates, layouts):
        if tuple(t.shape) != layout.tensor_shape:
            raise LayoutError(
                f"layout shape {layout.tensor_shape} != tensor shape {tuple(t.shape)}"
            )


def build_commit(intermediates: list[Tensor], layouts: list[UnitLayout]) -> MerkleCommit:
    _check_layouts(intermediates, layouts)
    layer_roots = []
    leaf_count = 0
    for ii, (tensor, layout) in enumerate(zip(intermediates, layouts)):
        leaves = [
            hash_unit(ii, ui, unit_bytes(tensor, region))
            for ui, region in enumerate(layout.units)
        ]
        leaf_count += len(leaves)
        layer_roots.append(_build_levels(leaves)[-1][0])
    return MerkleCommit(reduce_layer_roots(layer_roots), leaf_count, tuple(layer_roots))


def open_units(
    intermediates: list[Tensor],
    layouts: list[UnitLayout],
    requested: list[tuple[int, Region]],
    inference_id: int = 0,
) -> MerkleProof:
    """Open the minimal unit cover of each requested region, with paths.

    A region that straddles several units opens all of them; duplicate
    units across requests are opened once. Unit order in the proof is
    (intermediate, unit) ascending, which makes proofs replay-identical.
    """
    _check_layouts(intermediates, layouts)
    wanted: set[tuple[int, int]] = set()
    for ii, region in requested:
        if not (0 <= ii < len(layouts)):
            raise LayoutError(f"intermediate index {ii} out of range")
        for ui in layouts[ii].covering_units(region):
            wanted.add((ii, ui))
    if not wanted:
        raise LayoutError("nothing requested")

    # Subtree levels per intermediate that actually gets opened.
    needed_layers = {ii for ii, _ in wanted}
    sub_levels = {}
    layer_roots = []
    for ii, (tensor, layout) in enumerate(zip(intermediates, layouts)):
        leaves = [
            hash_unit(ii, ui, unit_bytes(tensor, region))
            for ui, region in enumerate(layout.units)
        ]
        levels = _build_levels(leaves)
        layer_roots.append(levels[-1][0])
        if ii in needed_layers:
            sub_levels[ii] = levels
    top_levels = _build_levels(layer_roots)

    opened, paths = [], []
    for ii, ui in sorted(wanted):
        data = unit_bytes(intermediates[ii], layouts[ii].units[ui])
        opened.append(OpenedUnit(ii, ui, data))
        paths.append(tuple(_auth_path(sub_levels[ii], ui) + _auth_path(top_levels, ii)))
    return MerkleProof(inference_id, tuple(opened), tuple(paths))


def verify_proof(commit: MerkleCommit, proof: MerkleProof) -> bool:
    """True iff every opened unit re-hashes through its path to commit.root.

    Pure function of its arguments. Structural defects (no opened units,
    bad hash widths, non-boolean flags) raise MalformedProofError instead
    of returning False: corruption of the proof *format* is a protocol
    fault, not evidence about the worker's computation.
    """
    if len(proof.opened) == 0:
        raise MalformedProofError("proof opens no units")
    if len(proof.opened) != len(proof.paths):
        raise MalformedProofError("path count != opened count")
    for unit, path in zip(proof.opened, proof.paths):
        for sibling, flag in path:
            if not isinstance(sibling, bytes) or len(sibling) != HASH_LEN:
                raise MalformedProofError("bad sibling hash length")
            if not isinstance(flag, bool):
                raise MalformedProofError("bad position flag")
        leaf = hash_unit(unit.intermediate_index, unit.unit_index, unit.data)
        if _fold_path(leaf, list(path)) != commit.root:
            return False
    return True


# ---------------------------------------------------------------------------
# proof serialization (see PROTOCOL.md)


def proof_to_bytes(proof: MerkleProof) -> bytes:
    out = bytearray(pack_u64(proof.inference_id))
    out += pack_u32(len(proof.opened))
    for unit in proof.opened:
        out += pack_u32(unit.intermediate_index)
        out += pack_u32(unit.unit_index)
        out += pack_u32(len(unit.data))
        out += unit.data
    for path in proof.paths:
        out += pack_u32(len(path))
        for sibling, sibling_is_left in path:
            out += bytes([1 if sibling_is_left else 0])
            out += sibling
    return bytes(out)


def proof_from_bytes(buf: bytes) -> MerkleProof:
    try:
        r = Reader(buf)
        inference_id = r.u64()
        n = r.u32()
        if n == 0:
            raise MalformedProofError("proof opens no units")
        opened = []
        for _ in range(n):
            ii = r.u32()
            ui = r.u32()
            ln = r.u32()
            opened.append(OpenedUnit(ii, ui, r.take(ln)))
        paths = []
        for _ in range(n):
            plen = r.u32()
            if plen > 64:
                raise MalformedProofError(f"implausible path length {plen}")
            path = []
            for _ in range(plen):
                flag = r.u8()
                if flag not in (0, 1):
                    raise MalformedProofError(f"bad position flag {flag}")
                path.append((r.take(HASH_LEN), flag == 1))
            paths.append(tuple(path))
        r.expect_end()
    except MalformedProofError:
        raise
    except Exception as exc:  # truncation, overflow, trailing bytes
        raise MalformedProofError(str(exc)) from exc
    return MerkleProof(inference_id, tuple(opened), tuple(paths))
