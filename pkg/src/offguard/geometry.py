"""Axis-aligned regions of tensors.

A Region is a per-axis (offset, extent) box. Regions are the unit of
partial verification: layouts tile a tensor with them, openings and
recomputation requests are phrased in them.
"""

from __future__ import annotations

from typing import NamedTuple

from .errors import LayoutError


class Region(NamedTuple):
    offset: tuple[int, ...]
    extent: tuple[int, ...]

    @property
    def rank(self) -> int:
        return len(self.offset)

    def size(self) -> int:
        n = 1
        for e in self.extent:
            n *= e
        return n

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + e) for o, e in zip(self.offset, self.extent))


def whole_region(shape) -> Region:
    return Region(tuple(0 for _ in shape), tuple(int(d) for d in shape))


def check_region(region: Region, shape) -> None:
    if len(region.offset) != len(shape) or len(region.extent) != len(shape):
        raise LayoutError(f"region rank {len(region.offset)} != tensor rank {len(shape)}")
    for o, e, d in zip(region.offset, region.extent, shape):
        if o < 0 or e < 1 or o + e > d:
            raise LayoutError(f"region {region} out of bounds for shape {tuple(shape)}")


def regions_overlap(a: Region, b: Region) -> bool:
    for (ao, ae), (bo, be) in zip(zip(a.offset, a.extent), zip(b.offset, b.extent)):
        if ao + ae <= bo or bo + be <= ao:
            return False
    return True


def region_contains(outer: Region, inner: Region) -> bool:
    for (oo, oe), (io, ie) in zip(zip(outer.offset, outer.extent), zip(inner.offset, inner.extent)):
        if io < oo or io + ie > oo + oe:
            return False
    return True
