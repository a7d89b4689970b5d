"""Declarative construction of the hand-pose network graph, plus structural
validation and parameter/FLOP accounting.

Encoder: three tiers (16/32/64 channels). Tier-1 is a single 3x3 stride-2
Conv-BN-ReLU. Tier-2 is two 131 bottleneck units (1x1 reduce, 3x3 grouped
stride on the first unit, 1x1 expand) whose outputs are concatenated —
the unit input itself is never concatenated. Tier-3 is an entry conv plus
two dilated-ladder units: four residual bottleneck blocks each, dilation
rates 1,2,3,4, grouped 3x3.

Decoder: a grouped 1x1 projection to the heatmap channel count, then two
(nearest-2x upsample + channel-wise 3x3) stages ending at half resolution.

Heads: primary heatmaps, keypoint/hand visibility (GAP + linear), and —
training only — auxiliary keypoint decoder (ungrouped), hand orientation,
discrete pose, segmentation over a small spatial path, and deep-supervision
heatmap heads at 1/8, 1/4, 1/2 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import NetConfig
from .convops import ConvSpec, Padding, conv_out_shape, mac_count
from .errors import ConfigError

__all__ = [
    "BlockKind", "BlockSpec", "TierSpec", "Node", "GraphSpec", "build_graph",
    "validate_config", "count_params", "count_flops", "node_param_count",
    "node_flop_count", "ValidationReport", "CountRow",
]


class BlockKind(Enum):
    CONV_BN_RELU = "conv_bn_relu"
    BOTTLENECK_131 = "bottleneck_131"
    DILATED_BOTTLENECK_RESNET = "dilated_bottleneck_resnet"


@dataclass(frozen=True)
class Node:
    """One executable graph node. `kind` is one of input, conv, upsample2x,
    add, concat, gap, linear. Conv nodes may fuse BN and a ReLU."""
    name: str
    kind: str
    inputs: tuple = ()
    conv: ConvSpec | None = None
    bn: bool = False
    act: str = "none"          # none | relu
    lin_in: int = 0
    lin_out: int = 0
    out_shape: tuple = ()      # (C,H,W) for maps, (C,) for vectors


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    conv_names: tuple
    dilation: int = 1
    residual: bool = False


@dataclass(frozen=True)
class UnitSpec:
    name: str
    blocks: tuple


@dataclass(frozen=True)
class TierSpec:
    index: int
    units: tuple
    out_channels: int
    downsample_stride: int


@dataclass(frozen=True)
class GraphSpec:
    config: NetConfig
    nodes: tuple
    heads: dict
    tiers: tuple
    decoder_stage_convs: tuple
    aux_decoder_convs: tuple
    inference_names: frozenset

    def node(self, name: str) -> Node:
        return self._node_map[name]

    def __post_init__(self):
        object.__setattr__(self, "_node_map", {n.name: n for n in self.nodes})


class _Builder:
    def __init__(self):
        self.nodes = []
        self.shapes = {}

    def add(self, node: Node):
        if node.name in self.shapes:
            raise ConfigError(f"duplicate node name {node.name}")
        self.nodes.append(node)
        self.shapes[node.name] = node.out_shape
        return node.name

    def input(self, name, shape):
        return self.add(Node(name, "input", (), out_shape=shape))

    def conv(self, name, src, spec: ConvSpec, bn=True, act="relu"):
        c, h, w = self.shapes[src]
        if c != spec.in_ch:
            raise ConfigError(f"{name}: input {src} has {c} channels, spec wants {spec.in_ch}")
        oh, ow = conv_out_shape(spec, h, w)
        return self.add(Node(name, "conv", (src,), conv=spec, bn=bn, act=act,
                             out_shape=(spec.out_ch, oh, ow)))

    def upsample(self, name, src):
        c, h, w = self.shapes[src]
        return self.add(Node(name, "upsample2x", (src,), out_shape=(c, 2 * h, 2 * w)))

    def addition(self, name, a, b, act="none"):
        if self.shapes[a] != self.shapes[b]:
            raise ConfigError(f"{name}: mismatched addend shapes "
                              f"{self.shapes[a]} vs {self.shapes[b]}")
        return self.add(Node(name, "add", (a, b), act=act, out_shape=self.shapes[a]))

    def concat(self, name, srcs):
        hs = {self.shapes[s][1:] for s in srcs}
        if len(hs) != 1:
            raise ConfigError(f"{name}: spatial dims differ among {srcs}")
        c = sum(self.shapes[s][0] for s in srcs)
        return self.add(Node(name, "concat", tuple(srcs),
                             out_shape=(c,) + next(iter(hs))))

    def gap(self, name, src):
        c = self.shapes[src][0]
        return self.add(Node(name, "gap", (src,), out_shape=(c,)))

    def linear(self, name, src, out_dim):
        (c,) = self.shapes[src]
        return self.add(Node(name, "linear", (src,), lin_in=c, lin_out=out_dim,
                             out_shape=(out_dim,)))


def build_graph(cfg: NetConfig) -> GraphSpec:
    """Construct the full network graph for a configuration.

    Inference nodes are emitted before training-only nodes, so a seeded
    weight init produces identical weights for the shared layers whether or
    not training heads are built.
    """
    if cfg.decoder_channels != cfg.keypoints:
        raise ConfigError("channel-wise primary head requires decoder_channels == keypoints")
    b = _Builder()
    c1, c2, c3 = cfg.tier1_channels, cfg.tier2_channels, cfg.tier3_channels
    g2, g3 = cfg.tier2_groups, cfg.tier3_groups
    dc = cfg.decoder_channels
    K, A = cfg.keypoints, cfg.aux_keypoints

    b.input("input", (1, cfg.input_h, cfg.input_w))

    # --- Tier 1: single conv layer -------------------------------------
    b.conv("t1.conv", "input", ConvSpec(1, c1, (3, 3), stride=2))
    tier1 = TierSpec(1, (UnitSpec("t1", (BlockSpec(BlockKind.CONV_BN_RELU,
                                                   ("t1.conv",)),)),), c1, 2)

    # --- Tier 2: two 131 units, outputs concatenated --------------------
    u_out = c2 // 2
    b2 = cfg.tier2_bottleneck

    def bottleneck131(prefix, src, in_ch, stride):
        b.conv(f"{prefix}.reduce", src, ConvSpec(in_ch, b2, (1, 1)))
        b.conv(f"{prefix}.conv", f"{prefix}.reduce",
               ConvSpec(b2, c2, (3, 3), stride=stride, groups=g2))
        b.conv(f"{prefix}.expand", f"{prefix}.conv", ConvSpec(c2, u_out, (1, 1)))
        return BlockSpec(BlockKind.BOTTLENECK_131,
                         (f"{prefix}.reduce", f"{prefix}.conv", f"{prefix}.expand"))

    blk_u1 = bottleneck131("t2.u1", "t1.conv", c1, 2)
    blk_u2 = bottleneck131("t2.u2", "t2.u1.expand", u_out, 1)
    b.concat("t2.cat", ("t2.u1.expand", "t2.u2.expand"))
    tier2 = TierSpec(2, (UnitSpec("t2.u1", (blk_u1,)), UnitSpec("t2.u2", (blk_u2,))), c2, 2)

    # --- Tier 3: entry conv + two dilated ladder units -------------------
    b.conv("t3.entry", "t2.cat", ConvSpec(c2, c3, (3, 3), stride=2, groups=g3))
    b3 = cfg.tier3_bottleneck
    src = "t3.entry"
    units3 = []
    for u in (1, 2):
        blocks = []
        for k, dil in enumerate(cfg.ladder_dilations, start=1):
            p = f"t3.u{u}.b{k}"
            b.conv(f"{p}.reduce", src, ConvSpec(c3, b3, (1, 1)))
            b.conv(f"{p}.conv", f"{p}.reduce",
                   ConvSpec(b3, b3, (3, 3), dilation=dil, groups=g3))
            b.conv(f"{p}.expand", f"{p}.conv",
                   ConvSpec(b3, c3, (1, 1), groups=g3), act="none")
            b.addition(f"{p}.add", f"{p}.expand", src, act="relu")
            blocks.append(BlockSpec(BlockKind.DILATED_BOTTLENECK_RESNET,
                                    (f"{p}.reduce", f"{p}.conv", f"{p}.expand"),
                                    dilation=dil, residual=True))
            src = f"{p}.add"
        units3.append(UnitSpec(f"t3.u{u}", tuple(blocks)))
    tier3 = TierSpec(3, tuple(units3), c3, 2)
    t3_out = src

    # --- Decoder: grouped projection + two channel-wise stages -----------
    b.conv("dec.proj", t3_out, ConvSpec(c3, dc, (1, 1), groups=dc))
    b.upsample("dec.up1", "dec.proj")
    b.conv("dec.s1", "dec.up1", ConvSpec(dc, dc, (3, 3), groups=dc))
    b.upsample("dec.up2", "dec.s1")
    b.conv("dec.s2", "dec.up2", ConvSpec(dc, dc, (3, 3), groups=dc))

    # --- Inference heads -------------------------------------------------
    b.conv("head.kp", "dec.s2", ConvSpec(dc, K, (3, 3), groups=K, has_bias=True),
           bn=False, act="none")
    b.gap("head.gap", t3_out)
    b.linear("head.vis", "head.gap", K + cfg.hands)

    heads = {"primary": "head.kp", "visibility": "head.vis"}
    inference_names = frozenset(n.name for n in b.nodes)

    aux_decoder = ()
    if cfg.training_heads:
        # deep-supervision heatmap heads at 1/8, 1/4, 1/2 resolution
        b.conv("ds8.head", "dec.proj", ConvSpec(dc, K, (1, 1), has_bias=True),
               bn=False, act="none")
        b.conv("ds4.head", "dec.s1", ConvSpec(dc, K, (1, 1), has_bias=True),
               bn=False, act="none")
        b.conv("ds2.head", "dec.s2", ConvSpec(dc, K, (1, 1), has_bias=True),
               bn=False, act="none")
        # ungrouped auxiliary keypoint decoder
        b.conv("aux.proj", t3_out, ConvSpec(c3, dc, (1, 1)))
        b.upsample("aux.up1", "aux.proj")
        b.conv("aux.s1", "aux.up1", ConvSpec(dc, dc, (3, 3)))
        b.upsample("aux.up2", "aux.s1")
        b.conv("aux.s2", "aux.up2", ConvSpec(dc, dc, (3, 3)))
        b.conv("aux.head", "aux.s2", ConvSpec(dc, A, (3, 3), has_bias=True),
               bn=False, act="none")
        aux_decoder = ("aux.proj", "aux.s1", "aux.s2", "aux.head")
        # per-hand classification heads off the pooled encoder features
        b.linear("head.cho", "head.gap", cfg.hands * cfg.orientation_classes)
        b.linear("head.dhp", "head.gap", cfg.hands * cfg.pose_classes)
        # simplified spatial path + segmentation head
        b.conv("sp.c1", "input", ConvSpec(1, 8, (3, 3), stride=2))
        b.conv("sp.c2", "sp.c1", ConvSpec(8, 16, (3, 3), stride=2))
        b.conv("sp.c3", "sp.c2", ConvSpec(16, 32, (3, 3), stride=2))
        b.concat("seg.cat", ("sp.c3", "dec.proj"))
        b.conv("seg.fuse", "seg.cat", ConvSpec(32 + dc, dc, (1, 1)))
        b.upsample("seg.up1", "seg.fuse")
        b.upsample("seg.up2", "seg.up1")
        b.conv("seg.head", "seg.up2", ConvSpec(dc, cfg.seg_classes, (3, 3), has_bias=True),
               bn=False, act="none")
        heads.update({
            "aux": "aux.head",
            "orientation": "head.cho",
            "pose": "head.dhp",
            "segmentation": "seg.head",
            "ds": ("ds8.head", "ds4.head", "ds2.head"),
        })

    return GraphSpec(cfg, tuple(b.nodes), heads, (tier1, tier2, tier3),
                     ("dec.s1", "dec.s2"), aux_decoder, inference_names)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    warnings: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_config(g: GraphSpec, lane_width: int | None = None) -> ValidationReport:
    """Report lane-alignment warnings and architecture-invariant violations.
    Never raises; the caller decides what is fatal.

    Alignment applies to the deployed (inference) convolutions: a conv whose
    filters-per-group count is not a lane multiple under-fills the vector
    registers.  Channel-wise convs (one filter per group) are exempt — they
    can never satisfy the rule and the decoder ships that way regardless.
    """
    lane = g.config.lane_width if lane_width is None else lane_width
    rep = ValidationReport()
    for node in g.nodes:
        if node.kind != "conv" or node.name not in g.inference_names:
            continue
        spec = node.conv
        fpg = spec.out_ch // spec.groups
        if fpg == 1:
            continue
        if fpg % lane:
            rep.warnings.append(
                f"{node.name}: {fpg} filters/group is not a multiple of {lane} lanes")

    cfg = g.config
    expected = {1: 16, 2: 32, 3: 64}
    for tier in g.tiers:
        if tier.out_channels != expected[tier.index]:
            rep.errors.append(
                f"tier-{tier.index} emits {tier.out_channels} channels, expected "
                f"{expected[tier.index]}")
    if cfg.tier2_groups != 4:
        rep.errors.append(f"tier-2 grouping factor is {cfg.tier2_groups}, expected 4")
    if cfg.tier3_groups != 8:
        rep.errors.append(f"tier-3 grouping factor is {cfg.tier3_groups}, expected 8")
    if tuple(cfg.ladder_dilations) != (1, 2, 3, 4):
        rep.errors.append(
            f"ladder dilations {tuple(cfg.ladder_dilations)} != (1, 2, 3, 4)")
    # Tier-2 concatenates unit outputs, never the tier input
    cat = g.node("t2.cat")
    tier2_input = g.node("t2.u1.reduce").inputs[0]
    if tier2_input in cat.inputs:
        rep.errors.append("tier-2 concatenation includes the unit input tensor")
    def kernel_pattern(blk):
        return tuple(g.node(n).conv.kernel[0] for n in blk.conv_names)

    for blk in [bl for u in g.tiers[1].units for bl in u.blocks]:
        if kernel_pattern(blk) != (1, 3, 1):
            rep.errors.append("tier-2 unit is not a 1-3-1 conv block")
    for blk in [bl for u in g.tiers[2].units for bl in u.blocks]:
        if len(blk.conv_names) != 3 or not blk.residual:
            rep.errors.append("ladder block is not a residual 1-3-1 bottleneck")
        elif kernel_pattern(blk) != (1, 3, 1):
            rep.errors.append("ladder block is not a 1-3-1 bottleneck")
    for name in g.decoder_stage_convs:
        spec = g.node(name).conv
        if not (spec.groups == spec.in_ch == spec.out_ch):
            rep.errors.append(f"decoder conv {name} is not channel-wise")
    for name in g.aux_decoder_convs:
        if g.node(name).conv.groups != 1:
            rep.errors.append(f"aux decoder conv {name} uses grouping")
    return rep


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountRow:
    name: str
    params: int
    macs: int
    flops: int


def node_param_count(node: Node) -> int:
    """Stored parameters: conv weights (+bias) + 4 BN arrays, linear w+b."""
    if node.kind == "conv":
        s = node.conv
        n = s.out_ch * s.in_per_group * s.kernel[0] * s.kernel[1]
        if s.has_bias:
            n += s.out_ch
        if node.bn:
            n += 4 * s.out_ch
        return n
    if node.kind == "linear":
        return node.lin_in * node.lin_out + node.lin_out
    return 0


def node_flop_count(node: Node) -> tuple:
    """(macs, flops) of one node under the reference-backend accounting:
    conv 2*MACs (+bias add, +2/elem BN, +1/elem ReLU), residual add 1/elem,
    GAP one add per pooled element plus one divide per channel, linear
    2*in*out + bias."""
    if node.kind == "conv":
        s = node.conv
        c, h, w = node.out_shape
        elems = c * h * w
        macs = elems * s.in_per_group * s.kernel[0] * s.kernel[1]
        flops = 2 * macs
        if s.has_bias:
            flops += elems
        if node.bn:
            flops += 2 * elems
        if node.act == "relu":
            flops += elems
        return macs, flops
    if node.kind == "add":
        elems = int(np.prod(node.out_shape))
        return 0, elems + (elems if node.act == "relu" else 0)
    if node.kind == "gap":
        # input elems adds + one divide per channel; recover in-shape from out C
        return 0, 0  # filled in by count_flops (needs producer shape)
    if node.kind == "linear":
        m = node.lin_in * node.lin_out
        return m, 2 * m + node.lin_out
    return 0, 0


def _scoped(g: GraphSpec, scope: str):
    if scope == "inference":
        return [n for n in g.nodes if n.name in g.inference_names]
    if scope == "full":
        return list(g.nodes)
    raise ConfigError(f"unknown scope {scope!r}")


def count_params(g: GraphSpec, scope: str = "inference"):
    """Total stored parameters with a per-layer breakdown."""
    rows = []
    for node in _scoped(g, scope):
        p = node_param_count(node)
        if p:
            rows.append(CountRow(node.name, p, 0, 0))
    return sum(r.params for r in rows), rows


def count_flops(g: GraphSpec, scope: str = "inference"):
    """Total FLOPs (2*MACs + bias/BN/activation adds) with per-layer rows.
    Matches the instrumented reference-backend counter exactly."""
    shape = {n.name: n.out_shape for n in g.nodes}
    rows = []
    for node in _scoped(g, scope):
        if node.kind == "gap":
            c, h, w = shape[node.inputs[0]]
            rows.append(CountRow(node.name, 0, 0, c * h * w + c))
            continue
        macs, flops = node_flop_count(node)
        if flops or macs:
            rows.append(CountRow(node.name, 0, macs, flops))
    total = sum(r.flops for r in rows)
    total_macs = sum(r.macs for r in rows)
    return total, total_macs, rows
