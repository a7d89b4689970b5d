"""Graph execution on either backend.

Reference backend: channel-planar tensors, direct reference convolution,
explicit inference-form batch norm. Optimized backend: channel-interleaved
tensors end to end, BN folded into the conv weights, packed kernel stacks,
and the comb decomposition for every dilated layer. The two backends agree
within 1e-4 max-abs end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .convops import (add_adds, add_mults, batchnorm_inference, comb_dilated_conv,
                      conv2d_packed, conv2d_ref, fold_batchnorm, relu,
                      upsample_nearest_2x)
from .errors import ShapeMismatchError
from .graph import GraphSpec
from .tensor import Layout, PackedWeights, Tensor, pack_kernels, to_interleaved, to_planar
from .weights import WeightStore, validate_weights


class Backend(Enum):
    REFERENCE = "reference"
    OPTIMIZED = "optimized"


class Mode(Enum):
    INFERENCE_HEADS = "inference"
    ALL_HEADS = "all"


@dataclass(frozen=True)
class HeadsOutput:
    """Raw (pre-softmax/sigmoid) head outputs as channel-planar arrays.
    Training-only fields are None under INFERENCE_HEADS."""
    primary_heatmaps: np.ndarray            # (K, H/2, W/2)
    visibility_logits: np.ndarray           # (K + hands,)
    aux_heatmaps: np.ndarray | None = None  # (A, H/2, W/2)
    orientation_logits: np.ndarray | None = None  # (hands, classes)
    pose_logits: np.ndarray | None = None         # (hands, classes)
    segmentation_logits: np.ndarray | None = None  # (3, H/2, W/2)
    deep_supervision: tuple | None = None   # 3 maps at 1/8, 1/4, 1/2


def prepare_optimized(g: GraphSpec, ws: WeightStore, lane_width: int | None = None):
    """Fold BN and pack every conv's kernel stack for the optimized backend.
    Returns {conv_name: (PackedWeights, folded_bias)} — reusable across calls."""
    lane = g.config.lane_width if lane_width is None else lane_width
    prep = {}
    for node in g.nodes:
        if node.kind != "conv":
            continue
        s = node.conv
        w = ws.get(node.name + ".w")
        bias = ws.get(node.name + ".b") if s.has_bias else None
        if node.bn:
            w, bias = fold_batchnorm(w, bias, ws.bn(node.name, g.config.bn_eps))
        prep[node.name] = (pack_kernels(w, s.groups, lane), bias)
    return prep


def _needed(g: GraphSpec, mode: Mode) -> set:
    targets = [g.heads["primary"], g.heads["visibility"]]
    if mode == Mode.ALL_HEADS:
        for key, val in g.heads.items():
            if key in ("primary", "visibility"):
                continue
            targets.extend(val if isinstance(val, tuple) else [val])
    needed = set()
    stack = list(targets)
    node_of = {n.name: n for n in g.nodes}
    while stack:
        name = stack.pop()
        if name in needed:
            continue
        needed.add(name)
        stack.extend(node_of[name].inputs)
    return needed


def _concat(tensors, layout: Layout) -> Tensor:
    c = sum(t.channels for t in tensors)
    h, w = tensors[0].height, tensors[0].width
    if layout == Layout.CHANNEL_PLANAR:
        data = np.concatenate([t.view() for t in tensors], axis=0)
    else:
        data = np.concatenate([t.view() for t in tensors], axis=2)
    return Tensor((c, h, w), layout, data.reshape(-1).copy())


def _gap(t: Tensor) -> np.ndarray:
    v = t.view().astype(np.float64)
    pooled = v.mean(axis=(1, 2)) if t.layout == Layout.CHANNEL_PLANAR else v.mean(axis=(0, 1))
    add_adds(t.channels * t.height * t.width)
    add_mults(t.channels)
    return pooled.astype(np.float32)


def _linear(vec: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    add_mults(w.size)
    add_adds(w.size + b.size)
    return (w.astype(np.float64) @ vec.astype(np.float64)
            + b.astype(np.float64)).astype(np.float32)


def forward(g: GraphSpec, ws: WeightStore, image: Tensor,
            backend: Backend = Backend.REFERENCE,
            mode: Mode = Mode.INFERENCE_HEADS,
            prepared=None) -> HeadsOutput:
    """Run the network. `image` is a (1, H, W) channel-planar tensor matching
    the configured resolution."""
    cfg = g.config
    if image.dims != (1, cfg.input_h, cfg.input_w):
        raise ShapeMismatchError(
            f"image dims {image.dims} != (1, {cfg.input_h}, {cfg.input_w})")
    if image.layout != Layout.CHANNEL_PLANAR:
        raise ShapeMismatchError("forward expects a channel-planar image")
    problems = validate_weights(g, ws)
    if problems:
        raise ShapeMismatchError("weight store invalid: " + "; ".join(problems[:5]))

    optimized = backend == Backend.OPTIMIZED
    if optimized and prepared is None:
        prepared = prepare_optimized(g, ws)
    layout = Layout.CHANNEL_INTERLEAVED if optimized else Layout.CHANNEL_PLANAR
    needed = _needed(g, mode)

    values = {}
    for node in g.nodes:
        if node.name not in needed:
            continue
        if node.kind == "input":
            values[node.name] = to_interleaved(image) if optimized else image
        elif node.kind == "conv":
            x = values[node.inputs[0]]
            s = node.conv
            if optimized:
                pw, bias = prepared[node.name]
                if s.dilation > 1:
                    t = comb_dilated_conv(x, pw, bias, s)
                else:
                    t = conv2d_packed(x, pw, bias, s)
            else:
                bias = ws.get(node.name + ".b") if s.has_bias else None
                t = conv2d_ref(x, ws.get(node.name + ".w"), bias, s)
                if node.bn:
                    t = batchnorm_inference(t, ws.bn(node.name, cfg.bn_eps))
            if node.act == "relu":
                t = relu(t)
            values[node.name] = t
        elif node.kind == "upsample2x":
            values[node.name] = upsample_nearest_2x(values[node.inputs[0]])
        elif node.kind == "add":
            a, bb = (values[i] for i in node.inputs)
            t = Tensor(a.dims, a.layout, a.data + bb.data)
            add_adds(a.data.size)
            if node.act == "relu":
                t = relu(t)
            values[node.name] = t
        elif node.kind == "concat":
            values[node.name] = _concat([values[i] for i in node.inputs], layout)
        elif node.kind == "gap":
            values[node.name] = _gap(values[node.inputs[0]])
        elif node.kind == "linear":
            values[node.name] = _linear(values[node.inputs[0]],
                                        ws.get(node.name + ".w"),
                                        ws.get(node.name + ".b"))
        else:
            raise ShapeMismatchError(f"unknown node kind {node.kind}")

    def planar(name):
        t = values[name]
        return t.to_array() if isinstance(t, Tensor) else t

    out = {
        "primary_heatmaps": planar(g.heads["primary"]),
        "visibility_logits": planar(g.heads["visibility"]),
    }
    if mode == Mode.ALL_HEADS and "aux" in g.heads:
        hands = cfg.hands
        out["aux_heatmaps"] = planar(g.heads["aux"])
        out["orientation_logits"] = planar(g.heads["orientation"]).reshape(
            hands, cfg.orientation_classes)
        out["pose_logits"] = planar(g.heads["pose"]).reshape(hands, cfg.pose_classes)
        out["segmentation_logits"] = planar(g.heads["segmentation"])
        out["deep_supervision"] = tuple(planar(n) for n in g.heads["ds"])
    return HeadsOutput(**out)
