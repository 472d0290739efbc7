"""Config-driven assembly of the two-branch segmentation network."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .blocks import (BGALayer, ContextEmbedding, GELayerS1, GELayerS2, SegHead,
                     SeparableLayer, StemBlock)
from .errors import ConfigError, StateError
from .nn import ConvBN, Module, ModuleDict, Sequential
from .tensor import Tensor, no_grad

AGGREGATIONS = ("bga", "sum", "concat", "detail", "semantic")
BOOSTER_POSITIONS = ("stage2", "stage3", "stage4", "stage5_4", "stage5_5")
DEFAULT_BOOSTERS = ("stage2", "stage3", "stage4", "stage5_4")
TAP_NAMES = ("detail_s1", "detail_s2", "detail_s3", "stage2", "stage3", "stage4",
             "stage5_4", "stage5_5", "agg_out")
_TAP_STRIDE = {"stage2": 4, "stage3": 8, "stage4": 16, "stage5_4": 32, "stage5_5": 32}


def round8(x):
    """Nearest multiple of 8, at least 8."""
    return max(8, 8 * int(math.floor(x / 8 + 0.5)))


def round4(x):
    return max(4, 4 * int(math.floor(x / 4 + 0.5)))


@dataclass(frozen=True)
class ArchConfig:
    """Architecture knobs.

    ``lam`` is the semantic/detail channel ratio (first two semantic stages
    only), ``expansion`` the GE expansion ratio, ``alpha``/``depth`` the
    width/depth multipliers.  ``ct_main``/``ct_aux`` default to
    ``round8(1024 * alpha)`` and four times the tapped width.
    ``agg`` also accepts ``"detail"``/``"semantic"`` for single-branch
    baselines; ``context``, ``gather_k`` and ``double_dw`` toggle the
    semantic block variants.
    """

    lam: float = 0.25
    expansion: int = 6
    alpha: float = 1.0
    depth: int = 1
    detail_channels: tuple = (64, 64, 128)
    agg: str = "bga"
    boosters: tuple = DEFAULT_BOOSTERS
    num_classes: int = 19
    ct_main: int | None = None
    ct_aux: int | None = None
    input_hw: tuple = (512, 1024)
    infer_hw: tuple | None = None
    context: bool = True
    gather_k: int = 3
    double_dw: bool = True

    def __post_init__(self):
        object.__setattr__(self, "detail_channels", tuple(int(c) for c in self.detail_channels))
        object.__setattr__(self, "boosters", tuple(self.boosters))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if self.infer_hw is not None:
            object.__setattr__(self, "infer_hw", tuple(int(v) for v in self.infer_hw))
        self.validate()

    def validate(self):
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lam must lie in (0, 1], got {self.lam}")
        if int(self.expansion) != self.expansion or self.expansion < 1:
            raise ConfigError(f"expansion must be an integer >= 1, got {self.expansion}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if int(self.depth) != self.depth or self.depth < 1:
            raise ConfigError(f"depth must be an integer >= 1, got {self.depth}")
        if len(self.detail_channels) != 3 or min(self.detail_channels) < 1:
            raise ConfigError(f"detail_channels must be three positive widths, "
                              f"got {self.detail_channels}")
        if self.agg not in AGGREGATIONS:
            raise ConfigError(f"agg must be one of {AGGREGATIONS}, got {self.agg!r}")
        seen = set()
        for pos in self.boosters:
            if pos not in BOOSTER_POSITIONS:
                raise ConfigError(f"unknown booster position {pos!r}")
            if pos in seen:
                raise ConfigError(f"duplicate booster position {pos!r}")
            seen.add(pos)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        for name in ("input_hw", "infer_hw"):
            hw = getattr(self, name)
            if hw is None:
                continue
            if len(hw) != 2 or hw[0] % 32 or hw[1] % 32 or min(hw) < 32:
                raise ConfigError(f"{name} must be two positive multiples of 32, got {hw}")
        if self.gather_k not in (1, 3):
            raise ConfigError(f"gather_k must be 1 or 3, got {self.gather_k}")

    def replace(self, **changes):
        return replace(self, **changes)

    # --- derived widths ---------------------------------------------------

    @property
    def detail_widths(self):
        return tuple(round8(self.alpha * c) for c in self.detail_channels)

    @property
    def semantic_widths(self):
        """(stem, stage3, stage4, stage5) channel widths."""
        c1, _, c3 = self.detail_channels
        return (round4(self.lam * self.alpha * c1), round8(self.lam * self.alpha * c3),
                round8(self.alpha * 64), round8(self.alpha * 128))

    @property
    def head_width(self):
        return self.ct_main if self.ct_main is not None else round8(1024 * self.alpha)

    def tap_width(self, tap):
        stem, s3, s4, s5 = self.semantic_widths
        return {"stage2": stem, "stage3": s3, "stage4": s4,
                "stage5_4": s5, "stage5_5": s5}[tap]

    def aux_width(self, tap):
        return self.ct_aux if self.ct_aux is not None else 4 * self.tap_width(tap)

    def to_dict(self):
        return asdict(self)


# --- branches -------------------------------------------------------------

class DetailBranch(Module):
    """Three VGG-style stages of 3x3 Conv-BN-ReLU, no residuals, stride 8."""

    def __init__(self, widths):
        super().__init__()
        c1, c2, c3 = widths
        self.s1 = Sequential([ConvBN(3, c1, 3, 2), ConvBN(c1, c1, 3)])
        self.s2 = Sequential([ConvBN(c1, c2, 3, 2), ConvBN(c2, c2, 3), ConvBN(c2, c2, 3)])
        self.s3 = Sequential([ConvBN(c2, c3, 3, 2), ConvBN(c3, c3, 3), ConvBN(c3, c3, 3)])

    def forward(self, x, taps=None):
        _, _, h, w = x.shape
        if h % 8 or w % 8:
            raise ConfigError(f"detail branch input {h}x{w} must be divisible by 8")
        x1 = self.s1(x)
        x2 = self.s2(x1)
        x3 = self.s3(x2)
        if taps is not None:
            taps.update(detail_s1=x1, detail_s2=x2, detail_s3=x3)
        return x3


class SemanticBranch(Module):
    """Stem, three gather-and-expansion stages and the context block, stride 32."""

    def __init__(self, cfg):
        super().__init__()
        stem, c3, c4, c5 = cfg.semantic_widths
        e, d, gk = cfg.expansion, cfg.depth, cfg.gather_k

        def stage(c_in, c_out, repeats):
            layers = [GELayerS2(c_in, c_out, e, gk, cfg.double_dw)]
            layers += [GELayerS1(c_out, e, gk) for _ in range(repeats)]
            return Sequential(layers)

        self.stem = StemBlock(stem)
        self.s3 = stage(stem, c3, d)
        self.s4 = stage(c3, c4, d)
        self.s5 = stage(c4, c5, 3 * d)
        self.ce = ContextEmbedding(c5) if cfg.context else None

    def forward(self, x, taps=None):
        x2 = self.stem(x)
        x3 = self.s3(x2)
        x4 = self.s4(x3)
        x54 = self.s5(x4)
        x55 = self.ce(x54) if self.ce is not None else x54
        if taps is not None:
            taps.update(stage2=x2, stage3=x3, stage4=x4, stage5_4=x54, stage5_5=x55)
        return x55


class NaiveAggregation(Module):
    """Summation or concatenation baseline: one separable layer per branch,
    semantic output upsampled x4 to the detail scale, then merged."""

    def __init__(self, c_detail, c_semantic, mode):
        super().__init__()
        self.mode = mode
        self.detail_proj = SeparableLayer(c_detail, c_detail)
        self.semantic_proj = SeparableLayer(c_semantic, c_detail)
        self.out_channels = 2 * c_detail if mode == "concat" else c_detail

    def forward(self, detail, semantic):
        d = self.detail_proj(detail)
        s = ops.upsample_bilinear(self.semantic_proj(semantic), 4)
        if d.shape != s.shape:
            raise ConfigError(f"aggregation inputs misaligned: {d.shape} vs {s.shape}")
        return ops.concat_channels([d, s]) if self.mode == "concat" else ops.add(d, s)


class BiSeNetV2(Module):
    """Two-branch network with main head and optional booster heads.

    ``forward`` returns main-head logits only; :meth:`forward_all` also
    returns booster logits (training) and intermediate taps.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        dw = cfg.detail_widths
        s5 = cfg.semantic_widths[3]
        use_detail = cfg.agg != "semantic"
        use_semantic = cfg.agg != "detail"
        self.detail = DetailBranch(dw) if use_detail else None
        self.semantic = SemanticBranch(cfg) if use_semantic else None
        if cfg.agg == "bga":
            if dw[2] != s5:
                raise ConfigError(f"BGA needs equal branch widths, got detail {dw[2]} and "
                                  f"semantic {s5}")
            self.aggregate = BGALayer(dw[2])
            agg_c, scale = dw[2], 8
        elif cfg.agg in ("sum", "concat"):
            self.aggregate = NaiveAggregation(dw[2], s5, cfg.agg)
            agg_c, scale = self.aggregate.out_channels, 8
        elif cfg.agg == "detail":
            self.aggregate, agg_c, scale = None, dw[2], 8
        else:
            self.aggregate, agg_c, scale = None, s5, 32
        self.head = SegHead(agg_c, cfg.head_width, cfg.num_classes, scale)
        self.aux_heads = ModuleDict()

    def forward_all(self, x, with_aux=None):
        """Returns ``(logits, aux_logits, taps)``.

        Booster heads run only when ``with_aux`` is true (default: in
        training mode), so eval-mode logits never depend on them.
        """
        if with_aux is None:
            with_aux = self.training
        taps = {}
        d = self.detail(x, taps) if self.detail is not None else None
        s = self.semantic(x, taps) if self.semantic is not None else None
        if self.aggregate is not None:
            agg = self.aggregate(d, s)
        else:
            agg = d if d is not None else s
        taps["agg_out"] = agg
        logits = self.head(agg)
        aux = {}
        if with_aux:
            for pos, head in self.aux_heads.items():
                aux[pos] = head(taps[pos])
        return logits, aux, taps

    def forward(self, x):
        return self.forward_all(x, with_aux=False)[0]

    def tap_shapes(self, input_hw=None, batch=1):
        """Shape-only pass: tap name -> shape, plus ``"logits"``."""
        h, w = input_hw or self.cfg.input_hw
        logits, aux, taps = self.forward_all(Tensor.meta((batch, 3, h, w)), with_aux=True)
        shapes = {k: v.shape for k, v in taps.items()}
        shapes["logits"] = logits.shape
        shapes.update({f"aux_{k}": v.shape for k, v in aux.items()})
        return shapes

    def arch_hash(self):
        """Digest of the config and the parameter registry (names and shapes)."""
        cfg = {k: v for k, v in self.cfg.to_dict().items() if k != "boosters"}
        cfg["boosters"] = list(self.aux_heads.keys())
        text = repr(sorted(cfg.items())) + "".join(
            f"{n}:{p.shape};" for n, p in self.named_parameters())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_detail_branch(cfg):
    return DetailBranch(cfg.detail_widths)


def build_semantic_branch(cfg):
    return SemanticBranch(cfg)


def attach_boosters(net, positions=None):
    """Replace ``net``'s booster heads with one per position (in place).

    A head at a tap of stride ``s`` upsamples by ``s`` back to input size.
    ``positions`` defaults to ``net.cfg.boosters``; an empty sequence
    detaches all boosters.
    """
    cfg = net.cfg
    if positions is None:
        positions = cfg.boosters
    elif isinstance(positions, ArchConfig):
        positions = positions.boosters
    positions = tuple(positions)
    if len(set(positions)) != len(positions):
        raise ConfigError(f"duplicate booster position in {positions}")
    if positions and net.semantic is None:
        raise ConfigError("booster heads need the semantic branch")
    heads = ModuleDict()
    for pos in BOOSTER_POSITIONS:
        if pos not in positions:
            continue
        heads[pos] = SegHead(cfg.tap_width(pos), cfg.aux_width(pos), cfg.num_classes,
                             _TAP_STRIDE[pos])
    unknown = set(positions) - set(BOOSTER_POSITIONS)
    if unknown:
        raise ConfigError(f"unknown booster positions {sorted(unknown)}")
    heads.training = net.training
    net.aux_heads = heads
    object.__setattr__(net, "cfg", replace(cfg, boosters=tuple(heads.keys())))
    return net


def build_bisenetv2(cfg=None, **overrides):
    cfg = (cfg or ArchConfig()).replace(**overrides) if overrides else (cfg or ArchConfig())
    net = BiSeNetV2(cfg)
    return attach_boosters(net, cfg.boosters)


def forward_inference(net, image, infer_hw=None):
    """Label map and logits for a batch of images.

    ``image`` is (n, 3, H, W).  It is resized bilinearly to the inference
    resolution (``infer_hw``, else ``net.cfg.infer_hw``, else unchanged), the
    main head alone is evaluated with BN in eval mode, and the argmax label
    map is resized back to (H, W) by nearest neighbour.
    Returns ``(labels, logits)`` with labels of shape (n, H, W).
    """
    if not net.initialized:
        raise StateError("network parameters are uninitialized")
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if len(x.shape) != 4 or x.shape[1] != 3:
        raise ConfigError(f"expected an (n, 3, H, W) image batch, got {x.shape}")
    _, _, h, w = x.shape
    target = infer_hw or net.cfg.infer_hw or (h, w)
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            if tuple(target) != (h, w):
                x = ops.resize_bilinear(x, target)
            logits = net(x)
    finally:
        net.train(was_training)
    labels = np.argmax(logits.data, axis=1)
    if labels.shape[1:] != (h, w):
        labels = ops.resize_nearest(labels, (h, w))
    return labels, logits


def count_params(module):
    return sum(p.size for p in module.parameters())
