"""Building blocks of the two-branch network.

All blocks are modules over NCHW tensors; shapes are enforced eagerly so that
meta-mode passes reject bad configurations before anything is allocated.
"""
from __future__ import annotations

from . import ops
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, ConvBN, Module, Sequential, depthwise


class StemBlock(Module):
    """Stride-4 entry block: a strided conv, then a conv branch and a max-pool
    branch concatenated and fused back to ``c_out`` channels."""

    def __init__(self, c_out, c_in=3):
        super().__init__()
        if c_out % 2:
            raise ConfigError(f"stem width must be even (half-width branch), got {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.conv = ConvBN(c_in, c_out, 3, stride=2)
        self.left = Sequential([ConvBN(c_out, c_out // 2, 1),
                                ConvBN(c_out // 2, c_out, 3, stride=2)])
        self.fuse = ConvBN(2 * c_out, c_out, 3)

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 4 or w % 4:
            raise ConfigError(f"stem input {h}x{w} must be divisible by 4")
        x = self.conv(x)
        left = self.left(x)
        right = ops.maxpool2d(x, 3, 2, 1)
        return self.fuse(ops.concat_channels([left, right]))


class ContextEmbedding(Module):
    """Global-average-pooled context broadcast-added back onto the input."""

    def __init__(self, c):
        super().__init__()
        self.c = c
        self.bn = BatchNorm2d(c)
        self.gap_conv = ConvBN(c, c, 1)
        self.last = ConvBN(c, c, 3)

    def forward(self, x):
        ctx = self.gap_conv(self.bn(ops.global_avgpool(x)))
        return self.last(ops.add(x, ctx))


class GELayerS1(Module):
    """Stride-1 gather-and-expansion layer with identity shortcut.

    ``gather_k=1`` swaps the 3x3 gather conv for a pointwise one.
    """

    def __init__(self, c, expansion=6, gather_k=3):
        super().__init__()
        if expansion < 1 or int(expansion) != expansion:
            raise ConfigError(f"expansion ratio must be an integer >= 1, got {expansion}")
        mid = c * int(expansion)
        self.c, self.expansion = c, int(expansion)
        self.gather = ConvBN(c, mid, gather_k)
        self.dw = depthwise(mid)
        self.project = ConvBN(mid, c, 1, relu=False)

    def forward(self, x):
        y = self.project(self.dw(self.gather(x)))
        return ops.relu(ops.add(y, x))


class GELayerS2(Module):
    """Stride-2 gather-and-expansion layer.

    Main path: gather conv, strided depthwise, depthwise, pointwise projection.
    Shortcut: strided depthwise then pointwise.  ``double_dw=False`` replaces
    the depthwise pair with one strided 5x5 depthwise conv.
    """

    def __init__(self, c_in, c_out, expansion=6, gather_k=3, double_dw=True):
        super().__init__()
        if expansion < 1 or int(expansion) != expansion:
            raise ConfigError(f"expansion ratio must be an integer >= 1, got {expansion}")
        mid = c_in * int(expansion)
        self.c_in, self.c_out, self.expansion = c_in, c_out, int(expansion)
        self.gather = ConvBN(c_in, mid, gather_k)
        if double_dw:
            self.dw = Sequential([depthwise(mid, 3, 2), depthwise(mid, 3, 1)])
        else:
            self.dw = Sequential([depthwise(mid, 5, 2)])
        self.project = ConvBN(mid, c_out, 1, relu=False)
        self.shortcut = Sequential([depthwise(c_in, 3, 2), ConvBN(c_in, c_out, 1, relu=False)])

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"stride-2 GE layer needs even spatial size, got {h}x{w}")
        y = self.project(self.dw(self.gather(x)))
        return ops.relu(ops.add(y, self.shortcut(x)))


class BGALayer(Module):
    """Bilateral guided aggregation of a 1/8-scale detail map and a 1/32-scale
    semantic map (spatial ratio exactly 4).

    Each branch is gated by a sigmoid of the other branch's response at the
    matching scale; the coarse product is upsampled, summed with the fine
    product and fused by a 3x3 conv + BN.
    """

    def __init__(self, c):
        super().__init__()
        self.c = c
        self.detail_keep = Sequential([depthwise(c), Conv2d(c, c, 1)])
        self.detail_down = ConvBN(c, c, 3, stride=2, relu=False)
        self.semantic_up = ConvBN(c, c, 3, relu=False)
        self.semantic_keep = Sequential([depthwise(c), Conv2d(c, c, 1)])
        self.fuse_conv = ConvBN(c, c, 3, relu=False)

    def detail_paths(self, detail):
        d1 = self.detail_keep(detail)
        d2 = ops.avgpool2d(self.detail_down(detail), 3, 2, 1)
        return d1, d2

    def gate_logits(self, semantic):
        """Pre-sigmoid gates: (fine gate at detail scale, coarse gate)."""
        s1 = ops.upsample_bilinear(self.semantic_up(semantic), 4)
        s2 = self.semantic_keep(semantic)
        return s1, s2

    def fuse(self, d1, d2, s1_logits, s2_logits):
        left = ops.mul(d1, ops.sigmoid(s1_logits))
        right = ops.mul(d2, ops.sigmoid(s2_logits))
        return self.fuse_conv(ops.add(left, ops.upsample_bilinear(right, 4)))

    def forward(self, detail, semantic):
        (n, c, h, w), (ns, cs, hs, ws) = detail.shape, semantic.shape
        if c != cs or n != ns:
            raise ConfigError(f"BGA inputs disagree on batch/channels: {detail.shape} vs "
                              f"{semantic.shape}")
        if h != 4 * hs or w != 4 * ws:
            raise ConfigError(f"BGA needs detail/semantic spatial ratio of exactly 4, got "
                              f"{h}x{w} vs {hs}x{ws}")
        d1, d2 = self.detail_paths(detail)
        s1, s2 = self.gate_logits(semantic)
        return self.fuse(d1, d2, s1, s2)


class SegHead(Module):
    """3x3 Conv-BN-ReLU to ``mid`` channels, 1x1 conv (with bias) to
    ``n_classes`` logits, bilinear upsample by ``scale``."""

    def __init__(self, c_in, mid, n_classes, scale):
        super().__init__()
        if n_classes < 1:
            raise ConfigError(f"class count must be >= 1, got {n_classes}")
        if int(scale) != scale or scale < 1:
            raise ConfigError(f"head scale must be a positive integer, got {scale}")
        self.c_in, self.mid, self.n_classes, self.scale = c_in, mid, n_classes, int(scale)
        self.conv = ConvBN(c_in, mid, 3)
        self.cls = Conv2d(mid, n_classes, 1, bias=True)

    def forward(self, x):
        y = self.cls(self.conv(x))
        return ops.upsample_bilinear(y, self.scale) if self.scale > 1 else y


class SeparableLayer(Module):
    """Depthwise 3x3 + BN followed by pointwise Conv-BN-ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.dw = depthwise(c_in)
        self.pw = ConvBN(c_in, c_out, 1)

    def forward(self, x):
        return self.pw(self.dw(x))
