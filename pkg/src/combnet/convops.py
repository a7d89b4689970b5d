"""Convolution kernels and related primitives.

Two convolution paths over the same math (cross-correlation, no kernel flip):

* :func:`conv2d_ref` — direct tap-loop convolution on channel-planar data.
  Serves as the oracle for everything else.
* :func:`conv2d_packed` — the optimized path: channel-interleaved input,
  packed kernel stack, inner products over channel-contiguous memory.

Dilated convolutions additionally get :func:`comb_dilated_conv`, which splits
the image into d*d pixel fields, runs a dense convolution per field and
recombines on output — the dilated result at dense-convolution cost (no
zero-stuffing work).

All kernels accumulate in 64-bit and store 32-bit.  An optional instrumented
counter records the multiplies/adds the kernels actually execute so that
analytic MAC/FLOP accounting can be cross-checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (ConfigError, LayoutMismatchError, ShapeMismatchError,
                     UnsupportedConfigError)
from .tensor import Layout, PackedWeights, Tensor

__all__ = [
    "Padding", "ConvSpec", "BnParams", "conv2d_ref", "conv2d_packed",
    "comb_dilated_conv", "split_fields", "merge_fields", "fold_batchnorm",
    "batchnorm_inference", "relu", "upsample_nearest_2x", "mac_count",
    "conv_out_shape", "zero_stuff_kernel", "zero_stuffed_spec", "OpCounter",
    "counting", "add_mults", "add_adds",
]


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple  # (kh, kw)
    stride: int = 1
    padding: Padding = Padding.SAME
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_ch, self.out_ch, kh, kw) < 1:
            raise ConfigError(f"non-positive dims in {self}")
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ConfigError(f"stride/dilation/groups must be >= 1 in {self}")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_ch={self.in_ch} "
                f"and out_ch={self.out_ch}")

    @property
    def in_per_group(self) -> int:
        return self.in_ch // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_ch // self.groups

    def pad(self) -> tuple:
        """(pad_h, pad_w) of symmetric zero padding."""
        if self.padding == Padding.VALID:
            return (0, 0)
        kh, kw = self.kernel
        return (self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2)

    def weight_shape(self) -> tuple:
        return (self.out_ch, self.in_per_group, self.kernel[0], self.kernel[1])


def conv_out_shape(spec: ConvSpec, in_h: int, in_w: int) -> tuple:
    """Output (h, w): out = floor((in + 2p - d*(k-1) - 1)/stride) + 1."""
    ph, pw = spec.pad()
    kh, kw = spec.kernel
    oh = (in_h + 2 * ph - spec.dilation * (kh - 1) - 1) // spec.stride + 1
    ow = (in_w + 2 * pw - spec.dilation * (kw - 1) - 1) // spec.stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(f"empty output for {in_h}x{in_w} with {spec}")
    return oh, ow


def mac_count(spec: ConvSpec, in_h: int, in_w: int) -> int:
    """Theoretical multiply-accumulates: out_h*out_w*out_ch*(in_ch/groups)*kh*kw."""
    oh, ow = conv_out_shape(spec, in_h, in_w)
    return oh * ow * spec.out_ch * spec.in_per_group * spec.kernel[0] * spec.kernel[1]


# ---------------------------------------------------------------------------
# Instrumented operation counter
# ---------------------------------------------------------------------------

class OpCounter:
    """Tally of scalar multiplies/adds actually executed by the kernels."""

    def __init__(self):
        self.mults = 0
        self.adds = 0

    @property
    def flops(self) -> int:
        return self.mults + self.adds


_active_counter: OpCounter | None = None


class counting:
    """Context manager enabling kernel instrumentation.

    with counting() as ops:
        conv2d_ref(...)
    ops.mults  # multiplies executed
    """

    def __enter__(self) -> OpCounter:
        global _active_counter
        self._prev = _active_counter
        _active_counter = OpCounter()
        return _active_counter

    def __exit__(self, *exc):
        global _active_counter
        _active_counter = self._prev
        return False


def add_mults(n: int):
    if _active_counter is not None:
        _active_counter.mults += int(n)


def add_adds(n: int):
    if _active_counter is not None:
        _active_counter.adds += int(n)


# ---------------------------------------------------------------------------
# Reference (planar) convolution
# ---------------------------------------------------------------------------

def _check_weights(w: np.ndarray, spec: ConvSpec):
    if tuple(w.shape) != spec.weight_shape():
        raise ShapeMismatchError(
            f"weight shape {w.shape} != expected {spec.weight_shape()}")


def _check_bias(b, spec: ConvSpec):
    if b is None:
        return None
    b = np.asarray(b, dtype=np.float32)
    if b.shape != (spec.out_ch,):
        raise ShapeMismatchError(f"bias shape {b.shape} != ({spec.out_ch},)")
    return b


def _conv_planar_core(xc: np.ndarray, w: np.ndarray, spec: ConvSpec,
                      pads: tuple, out_h: int, out_w: int) -> np.ndarray:
    """Direct convolution on a (C,H,W) array with explicit asymmetric pads
    (top, bottom, left, right). Tap loop outside, channel contraction inside;
    float64 accumulation. Returns (out_ch, out_h, out_w) float64."""
    pt, pb, pl, pr = pads
    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    xp = np.pad(xc.astype(np.float64), ((0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((spec.out_ch, out_h, out_w), dtype=np.float64)
    ipg, opg = spec.in_per_group, spec.out_per_group
    for g in range(spec.groups):
        xg = xp[g * ipg:(g + 1) * ipg]
        wg = w[g * opg:(g + 1) * opg].astype(np.float64)
        og = out[g * opg:(g + 1) * opg]
        for ky in range(kh):
            for kx in range(kw):
                patch = xg[:, ky * d: ky * d + (out_h - 1) * s + 1: s,
                           kx * d: kx * d + (out_w - 1) * s + 1: s]
                # (opg, ipg) . (ipg, oh, ow) -> (opg, oh, ow)
                og += np.tensordot(wg[:, :, ky, kx], patch, axes=([1], [0]))
    add_mults(out_h * out_w * spec.out_ch * ipg * kh * kw)
    add_adds(out_h * out_w * spec.out_ch * ipg * kh * kw)
    return out


def conv2d_ref(x: Tensor, w: np.ndarray, b, spec: ConvSpec) -> Tensor:
    """Reference convolution on a channel-planar tensor (the oracle path)."""
    if x.layout != Layout.CHANNEL_PLANAR:
        raise LayoutMismatchError("conv2d_ref expects a channel-planar tensor")
    if len(x.dims) != 3:
        raise ShapeMismatchError("conv kernels take rank-3 tensors (batch of 1)")
    if x.channels != spec.in_ch:
        raise ShapeMismatchError(f"input has {x.channels} channels, spec wants {spec.in_ch}")
    w = np.asarray(w, dtype=np.float32)
    _check_weights(w, spec)
    b = _check_bias(b, spec)
    ph, pw_ = spec.pad()
    out_h, out_w = conv_out_shape(spec, x.height, x.width)
    out = _conv_planar_core(x.view(), w, spec, (ph, ph, pw_, pw_), out_h, out_w)
    if b is not None:
        out += b[:, None, None].astype(np.float64)
        add_adds(out.size)
    return Tensor.from_array(out.astype(np.float32), Layout.CHANNEL_PLANAR)


# ---------------------------------------------------------------------------
# Optimized (interleaved, packed) convolution
# ---------------------------------------------------------------------------

def _check_packing(pw: PackedWeights, spec: ConvSpec):
    if (pw.out_ch, pw.in_ch_per_group, pw.kh, pw.kw) != spec.weight_shape():
        raise ConfigError(
            f"packed dims ({pw.out_ch},{pw.in_ch_per_group},{pw.kh},{pw.kw}) "
            f"inconsistent with spec {spec.weight_shape()}")
    if pw.groups != spec.groups:
        raise ConfigError(f"packed groups={pw.groups} != spec groups={spec.groups}")


def _conv_interleaved_core(xi: np.ndarray, pw: PackedWeights, spec: ConvSpec,
                           pads: tuple, out_h: int, out_w: int) -> np.ndarray:
    """Direct convolution on a (H,W,C) array using the packed kernel stack.

    Per tap, the contraction runs over the input channels of the group —
    contiguous in interleaved memory — and writes a lane block of output
    channels, which lands contiguously in the interleaved output.  No im2col
    matrix is ever materialized.  Returns (out_h, out_w, out_ch) float64.
    """
    pt, pb, pl, pr = pads
    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    xp = np.pad(xi.astype(np.float64), ((pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((out_h, out_w, spec.out_ch), dtype=np.float64)
    ipg, opg = spec.in_per_group, spec.out_per_group
    tap_block = kh * kw * ipg  # packed floats per (group, lane-block, all taps) per lane
    offset = 0
    for g in range(spec.groups):
        xg = xp[:, :, g * ipg:(g + 1) * ipg]
        for start, lanes in pw.lane_blocks():
            # packed slice laid out (ky, kx, ci, lane)
            wblk = pw.data[offset: offset + tap_block * lanes]
            wblk = wblk.reshape(kh, kw, ipg, lanes).astype(np.float64)
            oc0 = g * opg + start
            oblk = out[:, :, oc0: oc0 + lanes]
            for ky in range(kh):
                for kx in range(kw):
                    patch = xg[ky * d: ky * d + (out_h - 1) * s + 1: s,
                               kx * d: kx * d + (out_w - 1) * s + 1: s]
                    # (oh, ow, ipg) @ (ipg, lanes) -> (oh, ow, lanes)
                    oblk += patch @ wblk[ky, kx]
            offset += tap_block * lanes
    add_mults(out_h * out_w * spec.out_ch * ipg * kh * kw)
    add_adds(out_h * out_w * spec.out_ch * ipg * kh * kw)
    return out


def conv2d_packed(x: Tensor, pw: PackedWeights, b, spec: ConvSpec) -> Tensor:
    """Optimized convolution: interleaved input, packed weights, interleaved
    output. Numerically matches conv2d_ref within 1e-5 max-abs."""
    if x.layout != Layout.CHANNEL_INTERLEAVED:
        raise LayoutMismatchError("conv2d_packed expects a channel-interleaved tensor")
    if len(x.dims) != 3:
        raise ShapeMismatchError("conv kernels take rank-3 tensors (batch of 1)")
    if x.channels != spec.in_ch:
        raise ShapeMismatchError(f"input has {x.channels} channels, spec wants {spec.in_ch}")
    _check_packing(pw, spec)
    b = _check_bias(b, spec)
    ph, pw_pad = spec.pad()
    out_h, out_w = conv_out_shape(spec, x.height, x.width)
    out = _conv_interleaved_core(x.view(), pw, spec, (ph, ph, pw_pad, pw_pad),
                                 out_h, out_w)
    if b is not None:
        out += b[None, None, :].astype(np.float64)
        add_adds(out.size)
    flat = out.astype(np.float32).reshape(-1)
    return Tensor((spec.out_ch, out_h, out_w), Layout.CHANNEL_INTERLEAVED, flat)


# ---------------------------------------------------------------------------
# Field split/merge and the comb dilated convolution
# ---------------------------------------------------------------------------

def split_fields(x: Tensor, d: int) -> list:
    """Partition into d*d fields; field (i,j) holds pixels with
    row % d == i and col % d == j, ordered row-major by (i,j)."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    arr = x.to_array()
    fields = []
    for i in range(d):
        for j in range(d):
            sub = arr[..., i::d, j::d]
            if sub.shape[-1] == 0 or sub.shape[-2] == 0:
                raise ConfigError(f"d={d} exceeds spatial dims {x.dims}")
            fields.append(Tensor.from_array(np.ascontiguousarray(sub), x.layout))
    return fields


def merge_fields(fields: list, d: int) -> Tensor:
    """Inverse of split_fields: merge_fields(split_fields(x, d), d) == x."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if len(fields) != d * d:
        raise ShapeMismatchError(f"expected {d * d} fields, got {len(fields)}")
    layout = fields[0].layout
    lead = fields[0].dims[:-2]
    for f in fields:
        if f.layout != layout or f.dims[:-2] != lead:
            raise ShapeMismatchError("fields disagree on layout or leading dims")
    heights = [fields[i * d].height for i in range(d)]
    widths = [fields[j].width for j in range(d)]
    H, W = sum(heights), sum(widths)
    out = np.empty(lead + (H, W), dtype=np.float32)
    for i in range(d):
        for j in range(d):
            f = fields[i * d + j]
            if f.height != heights[i] or f.width != widths[j]:
                raise ShapeMismatchError(
                    f"field ({i},{j}) shape {f.dims} inconsistent with grid")
            out[..., i::d, j::d] = f.to_array()
    return Tensor.from_array(out, layout)


def comb_dilated_conv(x: Tensor, w, b, spec: ConvSpec) -> Tensor:
    """Dilated convolution via comb decomposition.

    The image is split into d*d pixel fields; each output field is a *dense*
    (dilation-1) convolution of one input field with the unmodified kernel,
    recombined on output.  Executed MACs equal the dilated convolution's
    theoretical count — no zero-stuffing work.  Stride must be 1.

    Accepts either a planar tensor with a raw weight array (reference dense
    kernel per field) or an interleaved tensor with PackedWeights (optimized
    dense kernel per field).  d=1 degenerates to the plain dense convolution.
    """
    if spec.stride != 1:
        raise UnsupportedConfigError("comb decomposition requires stride 1")
    if spec.padding != Padding.SAME:
        raise UnsupportedConfigError("comb decomposition requires Same padding")
    if len(x.dims) != 3:
        raise ShapeMismatchError("conv kernels take rank-3 tensors (batch of 1)")
    if x.channels != spec.in_ch:
        raise ShapeMismatchError(f"input has {x.channels} channels, spec wants {spec.in_ch}")

    packed = isinstance(w, PackedWeights)
    if packed:
        if x.layout != Layout.CHANNEL_INTERLEAVED:
            raise LayoutMismatchError("packed comb path expects interleaved input")
        _check_packing(w, spec)
    else:
        if x.layout != Layout.CHANNEL_PLANAR:
            raise LayoutMismatchError("reference comb path expects planar input")
        w = np.asarray(w, dtype=np.float32)
        _check_weights(w, spec)
    b = _check_bias(b, spec)

    d = spec.dilation
    kh, kw = spec.kernel
    ph, pw_pad = spec.pad()
    out_h, out_w = conv_out_shape(spec, x.height, x.width)
    dense = ConvSpec(spec.in_ch, spec.out_ch, spec.kernel, 1, Padding.VALID,
                     1, spec.groups, spec.has_bias)

    arr = x.view()  # (C,H,W) planar or (H,W,C) interleaved
    if packed:
        full = np.zeros((out_h, out_w, spec.out_ch), dtype=np.float64)
    else:
        full = np.zeros((spec.out_ch, out_h, out_w), dtype=np.float64)

    for i in range(min(d, out_h)):
        n_out_i = -(-(out_h - i) // d)  # ceil
        i_src = (i - ph) % d
        pt = (i_src - (i - ph)) // d  # -s_i >= 0
        for j in range(min(d, out_w)):
            n_out_j = -(-(out_w - j) // d)
            j_src = (j - pw_pad) % d
            pl = (j_src - (j - pw_pad)) // d
            if packed:
                field = arr[i_src::d, j_src::d, :]
                n_in_i, n_in_j = field.shape[0], field.shape[1]
            else:
                field = arr[:, i_src::d, j_src::d]
                n_in_i, n_in_j = field.shape[1], field.shape[2]
            pb = n_out_i - n_in_i - pt + kh - 1
            pr = n_out_j - n_in_j - pl + kw - 1
            oh = n_out_i + max(0, -pb)  # compute extra rows, slice them off
            ow = n_out_j + max(0, -pr)
            pads = (pt, max(0, pb), pl, max(0, pr))
            if packed:
                sub = _conv_interleaved_core(field, w, dense, pads, oh, ow)
                full[i::d, j::d, :] = sub[:n_out_i, :n_out_j, :]
            else:
                sub = _conv_planar_core(field, w, dense, pads, oh, ow)
                full[:, i::d, j::d] = sub[:, :n_out_i, :n_out_j]

    if b is not None:
        if packed:
            full += b[None, None, :].astype(np.float64)
        else:
            full += b[:, None, None].astype(np.float64)
        add_adds(full.size)
    if packed:
        flat = full.astype(np.float32).reshape(-1)
        return Tensor((spec.out_ch, out_h, out_w), Layout.CHANNEL_INTERLEAVED, flat)
    return Tensor.from_array(full.astype(np.float32), Layout.CHANNEL_PLANAR)


def zero_stuff_kernel(w: np.ndarray, d: int) -> np.ndarray:
    """Expand a kernel to its dilation-d footprint by inserting zeros.
    Running the result at dilation 1 reproduces the dilated convolution at
    ((d*(k-1)+1)/k)^2 times the arithmetic — the baseline comb avoids."""
    w = np.asarray(w, dtype=np.float32)
    out_ch, ipg, kh, kw = w.shape
    sh, sw = d * (kh - 1) + 1, d * (kw - 1) + 1
    stuffed = np.zeros((out_ch, ipg, sh, sw), dtype=np.float32)
    stuffed[:, :, ::d, ::d] = w
    return stuffed


def zero_stuffed_spec(spec: ConvSpec) -> ConvSpec:
    """Dilation-1 spec matching zero_stuff_kernel(w, spec.dilation)."""
    kh, kw = spec.kernel
    d = spec.dilation
    return ConvSpec(spec.in_ch, spec.out_ch,
                    (d * (kh - 1) + 1, d * (kw - 1) + 1),
                    spec.stride, spec.padding, 1, spec.groups, spec.has_bias)


# ---------------------------------------------------------------------------
# Batch norm, activation, upsampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            object.__setattr__(self, name, arr)
        n = self.gamma.shape
        if not (self.beta.shape == n and self.mean.shape == n and self.var.shape == n):
            raise ShapeMismatchError("BN parameter arrays differ in length")
        if self.eps <= 0:
            raise ConfigError("BN epsilon must be positive")
        if np.any(self.var < 0):
            raise ConfigError("BN running variance must be non-negative")

    @staticmethod
    def identity(ch: int, eps: float = 1e-5) -> "BnParams":
        return BnParams(np.ones(ch, np.float32), np.zeros(ch, np.float32),
                        np.zeros(ch, np.float32), np.ones(ch, np.float32), eps)

    def scale_shift(self) -> tuple:
        """Per-channel (s, t) with bn(x) = x*s + t."""
        s = self.gamma / np.sqrt(self.var + np.float32(self.eps))
        t = self.beta - self.mean * s
        return s.astype(np.float32), t.astype(np.float32)


def fold_batchnorm(w: np.ndarray, b, bn: BnParams) -> tuple:
    """Fold inference-time BN into the preceding conv:
    w'_o = w_o * gamma_o/sqrt(var_o+eps); b'_o = (b_o-mean_o)*gamma_o/sqrt(var_o+eps)+beta_o."""
    w = np.asarray(w, dtype=np.float32)
    if bn.gamma.shape[0] != w.shape[0]:
        raise ShapeMismatchError(
            f"BN length {bn.gamma.shape[0]} != out_ch {w.shape[0]}")
    s, t = bn.scale_shift()
    wf = (w * s[:, None, None, None]).astype(np.float32)
    b = np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32)
    bf = (b * s + t).astype(np.float32)
    return wf, bf


def batchnorm_inference(x: Tensor, bn: BnParams) -> Tensor:
    """Apply BN in inference form (x*s + t per channel)."""
    s, t = bn.scale_shift()
    v = x.view()
    if x.layout == Layout.CHANNEL_PLANAR:
        shape = (-1, 1, 1) if len(x.dims) == 3 else (1, -1, 1, 1)
        out = v * s.reshape(shape) + t.reshape(shape)
    else:
        out = v * s + t  # channels are the trailing axis
    add_mults(out.size)
    add_adds(out.size)
    return Tensor(x.dims, x.layout, out.astype(np.float32).reshape(-1))


def relu(x: Tensor) -> Tensor:
    add_adds(x.data.size)  # one compare/select per element
    return Tensor(x.dims, x.layout, np.maximum(x.data, np.float32(0.0)))


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """2x nearest-neighbor spatial replication; channel count preserved."""
    v = x.view()
    if x.layout == Layout.CHANNEL_PLANAR:
        out = v.repeat(2, axis=-2).repeat(2, axis=-1)
        dims = x.dims[:-2] + (x.height * 2, x.width * 2)
        return Tensor(dims, x.layout, out.reshape(-1).copy())
    axes_h = len(v.shape) - 3  # (H,W,C) or (N,H,W,C)
    out = v.repeat(2, axis=axes_h).repeat(2, axis=axes_h + 1)
    dims = x.dims[:-2] + (x.height * 2, x.width * 2)
    return Tensor(dims, x.layout, out.reshape(-1).copy())
