"""Dense rank-3/4 tensors with two memory layouts, plus the kernel-stack
packing used by the optimized convolution backend.

Layouts (row-major over the listed axis order):

* channel-planar:      (C, H, W)   flat index ((c*H) + y)*W + x
* channel-interleaved: (H, W, C)   flat index ((y*W) + x)*C + c

Rank-4 tensors prepend a batch axis: (N, C, H, W) / (N, H, W, C). Both
formulas are what ``numpy.reshape`` gives for the respective axis order, so
layout transforms are plain transposes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, LayoutMismatchError, ShapeMismatchError


class Layout(Enum):
    CHANNEL_PLANAR = "planar"
    CHANNEL_INTERLEAVED = "interleaved"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Tensor:
    """Immutable dense tensor. ``data`` is flat float32, row-major within the
    declared layout; values are safely shareable across threads."""

    dims: tuple  # (C, H, W) or (N, C, H, W), independent of layout
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        if len(self.dims) not in (3, 4):
            raise ShapeMismatchError(f"rank must be 3 or 4, got dims={self.dims}")
        if any(d < 1 for d in self.dims):
            raise ShapeMismatchError(f"all dims must be >= 1, got {self.dims}")
        n = int(np.prod(self.dims))
        if self.data.ndim != 1 or self.data.size != n:
            raise ShapeMismatchError(
                f"data length {self.data.size} != product of dims {self.dims}"
            )
        object.__setattr__(self, "data", _freeze(self.data))

    # -- constructors ------------------------------------------------------

    @staticmethod
    def from_array(arr: np.ndarray, layout: Layout = Layout.CHANNEL_PLANAR) -> "Tensor":
        """Build from a (C,H,W) or (N,C,H,W) array, storing in `layout`."""
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim not in (3, 4):
            raise ShapeMismatchError(f"expected rank 3 or 4, got {arr.ndim}")
        dims = arr.shape
        if layout == Layout.CHANNEL_PLANAR:
            flat = arr.reshape(-1)
        else:
            axes = (1, 2, 0) if arr.ndim == 3 else (0, 2, 3, 1)
            flat = arr.transpose(axes).reshape(-1)
        return Tensor(tuple(int(d) for d in dims), layout, flat.copy())

    # -- shape helpers -----------------------------------------------------

    @property
    def channels(self) -> int:
        return self.dims[-3]

    @property
    def height(self) -> int:
        return self.dims[-2]

    @property
    def width(self) -> int:
        return self.dims[-1]

    def storage_shape(self) -> tuple:
        """Shape of the data when reshaped in its native layout order."""
        if self.layout == Layout.CHANNEL_PLANAR:
            return self.dims
        if len(self.dims) == 3:
            c, h, w = self.dims
            return (h, w, c)
        n, c, h, w = self.dims
        return (n, h, w, c)

    def view(self) -> np.ndarray:
        """Zero-copy view in the native layout order (CHW or HWC)."""
        return self.data.reshape(self.storage_shape())

    def to_array(self) -> np.ndarray:
        """(C,H,W) / (N,C,H,W) array regardless of layout (copies if needed)."""
        v = self.view()
        if self.layout == Layout.CHANNEL_PLANAR:
            return v
        axes = (2, 0, 1) if len(self.dims) == 3 else (0, 3, 1, 2)
        return np.ascontiguousarray(v.transpose(axes))

    def at(self, c: int, y: int, x: int, n: int = 0) -> float:
        """Read one element via the explicit flat-index formula."""
        if len(self.dims) == 3:
            nn, (C, H, W) = 0, self.dims
        else:
            (N, C, H, W) = self.dims
            nn = n
        if not (0 <= c < C and 0 <= y < H and 0 <= x < W):
            raise ShapeMismatchError(f"index ({c},{y},{x}) out of bounds for {self.dims}")
        if self.layout == Layout.CHANNEL_PLANAR:
            idx = ((nn * C + c) * H + y) * W + x
        else:
            idx = ((nn * H + y) * W + x) * C + c
        return float(self.data[idx])


def to_interleaved(t: Tensor) -> Tensor:
    """Planar -> interleaved; element (c,y,x) preserved, layout flag flipped."""
    if t.layout != Layout.CHANNEL_PLANAR:
        raise LayoutMismatchError("to_interleaved expects a channel-planar tensor")
    v = t.view()
    axes = (1, 2, 0) if len(t.dims) == 3 else (0, 2, 3, 1)
    return Tensor(t.dims, Layout.CHANNEL_INTERLEAVED, v.transpose(axes).reshape(-1).copy())


def to_planar(t: Tensor) -> Tensor:
    """Interleaved -> planar; exact inverse of :func:`to_interleaved`."""
    if t.layout != Layout.CHANNEL_INTERLEAVED:
        raise LayoutMismatchError("to_planar expects a channel-interleaved tensor")
    v = t.view()
    axes = (2, 0, 1) if len(t.dims) == 3 else (0, 3, 1, 2)
    return Tensor(t.dims, Layout.CHANNEL_PLANAR, v.transpose(axes).reshape(-1).copy())


# ---------------------------------------------------------------------------
# Kernel packing
# ---------------------------------------------------------------------------

DEFAULT_LANE_WIDTH = 4  # 128-bit vectors of 32-bit reals


@dataclass(frozen=True)
class PackedWeights:
    """Kernel stack reordered for the interleaved dot-product kernel.

    Packing order (outer to inner): group, lane-block of output channels,
    kernel row, kernel column, input channel within group, lane.  With that
    order a dot product over (input channel, lane) walks packed memory
    sequentially and writes `lane_width` interleaved output channels at once.
    The last block of a group is ragged when out_ch/groups is not a lane
    multiple; `alignment_warning` flags that configuration.
    """

    out_ch: int
    in_ch_per_group: int
    kh: int
    kw: int
    groups: int
    lane_width: int
    data: np.ndarray = field(repr=False)
    alignment_warning: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data))

    def lane_blocks(self):
        """Yield (block_start, block_lanes) within one group."""
        opg = self.out_ch // self.groups
        start = 0
        while start < opg:
            yield start, min(self.lane_width, opg - start)
            start += self.lane_width


def _packing_permutation(out_ch, ipg, kh, kw, groups, lane_width):
    """Flat source indices of w[(oc, ci, ky, kx)] in packed order."""
    opg = out_ch // groups
    perm = np.empty(out_ch * ipg * kh * kw, dtype=np.int64)
    pos = 0
    for g in range(groups):
        start = 0
        while start < opg:
            lanes = min(lane_width, opg - start)
            for ky in range(kh):
                for kx in range(kw):
                    for ci in range(ipg):
                        for o in range(lanes):
                            oc = g * opg + start + o
                            perm[pos] = ((oc * ipg + ci) * kh + ky) * kw + kx
                            pos += 1
            start += lane_width
    return perm


def pack_kernels(w: np.ndarray, groups: int, lane_width: int = DEFAULT_LANE_WIDTH) -> PackedWeights:
    """Reorder a (out_ch, in_ch_per_group, kh, kw) weight array for the
    optimized backend. Pure permutation: no values created or destroyed."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 4:
        raise ShapeMismatchError(f"weights must be rank 4, got {w.ndim}")
    out_ch, ipg, kh, kw = w.shape
    if groups < 1 or out_ch % groups != 0:
        raise ConfigError(f"groups={groups} does not divide out_ch={out_ch}")
    if lane_width < 1:
        raise ConfigError(f"lane_width must be positive, got {lane_width}")
    perm = _packing_permutation(out_ch, ipg, kh, kw, groups, lane_width)
    packed = w.reshape(-1)[perm]
    warn = (out_ch // groups) % lane_width != 0
    return PackedWeights(out_ch, ipg, kh, kw, groups, lane_width, packed, warn)


def unpack_kernels(pw: PackedWeights) -> np.ndarray:
    """Invert :func:`pack_kernels`, returning (out_ch, in_ch_per_group, kh, kw)."""
    perm = _packing_permutation(pw.out_ch, pw.in_ch_per_group, pw.kh, pw.kw,
                                pw.groups, pw.lane_width)
    flat = np.empty(pw.data.size, dtype=np.float32)
    flat[perm] = pw.data
    return flat.reshape(pw.out_ch, pw.in_ch_per_group, pw.kh, pw.kw)
