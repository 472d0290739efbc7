"""Static cost model: MACs, FLOPs, parameters and activation bytes per op.

Costs come from a meta-mode trace of the inference graph (booster heads are
never executed there), so no activations are allocated.

Conventions
-----------
``"macs"``
    FLOPs column equals convolution multiply-accumulates; nothing else counts.
``"flops"``
    FLOPs column is ``2 * MACs`` plus one op per output element of
    batch-norm, activations, pooling windows, interpolation, bias and
    elementwise sums/products.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ArchConfig, BiSeNetV2, count_params
from .tensor import Tensor, trace

CONVENTIONS = ("macs", "flops")


@dataclass
class LayerCost:
    name: str
    op: str
    macs: int
    flops: int
    params: int
    act_bytes: int


@dataclass
class CostReport:
    per_layer: list
    convention: str
    input_hw: tuple
    include_head: bool
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.totals = {k: sum(getattr(r, k) for r in self.per_layer)
                       for k in ("macs", "flops", "params", "act_bytes")}

    @property
    def gflops(self):
        return self.totals["flops"] / 1e9

    def to_text(self):
        w = max([len(r.name) for r in self.per_layer] + [5])
        lines = [f"# convention={self.convention} input_hw={self.input_hw[0]}x"
                 f"{self.input_hw[1]} include_head={self.include_head}",
                 f"{'layer':<{w}}  {'op':<18}{'MACs':>15}{'FLOPs':>15}{'params':>11}"
                 f"{'act_bytes':>13}"]
        for r in self.per_layer:
            lines.append(f"{r.name:<{w}}  {r.op:<18}{r.macs:>15,}{r.flops:>15,}"
                         f"{r.params:>11,}{r.act_bytes:>13,}")
        t = self.totals
        lines.append(f"{'TOTAL':<{w}}  {'':<18}{t['macs']:>15,}{t['flops']:>15,}"
                     f"{t['params']:>11,}{t['act_bytes']:>13,}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "op", "macs", "flops", "params", "act_bytes"])
        for r in self.per_layer:
            wr.writerow([r.name, r.op, r.macs, r.flops, r.params, r.act_bytes])
        return buf.getvalue()


def count_costs(net, input_hw=None, convention="macs", include_head=True, bytes_per_value=4):
    """Trace ``net`` on a (1, 3, h, w) meta input and tabulate every op."""
    if convention not in CONVENTIONS:
        raise ConfigError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    if input_hw is None:
        input_hw = net.cfg.input_hw
    h, w = (int(v) for v in input_hw)
    x = Tensor.meta((1, 3, h, w))
    with trace() as t:
        if isinstance(net, BiSeNetV2):
            net.forward_all(x, with_aux=False)
        else:
            net(x)
    rows = []
    for rec in t.records:
        if not include_head and (rec.scope == "head" or rec.scope.startswith("head/")):
            continue
        flops = rec.macs if convention == "macs" else 2 * rec.macs + rec.elementwise
        n_out = 1
        for s in rec.out_shape:
            n_out *= s
        rows.append(LayerCost(rec.scope or "<root>", rec.op, rec.macs, flops, rec.params,
                              n_out * bytes_per_value))
    return CostReport(rows, convention, (h, w), include_head)


# Published complexity columns (GFLOPs, reported for 2048x1024 inputs).
PUBLISHED_GFLOPS = {
    ("table2", "detail-only"): 15.26,
    ("table2", "semantic-only"): 7.63,
    ("table2", "sum"): 20.77,
    ("table2", "concat"): 21.98,
    ("table2", "bga"): 21.15,
    ("table3a", "lam=1/2"): 25.84,
    ("table3a", "lam=1/4"): 21.15,
    ("table3a", "lam=1/8"): 19.93,
    ("table3a", "lam=1/16"): 19.61,
    ("table3b", "full"): 21.15,
    ("table3b", "no-context"): 21.07,
    ("table3b", "single-5x5-dw"): 21.15,
    ("table3b", "1x1-gather"): 15.78,
    ("table3c", "e=1"): 17.78,
    ("table3c", "e=2"): 18.45,
    ("table3c", "e=4"): 19.8,
    ("table3c", "e=6"): 21.15,
    ("table3c", "e=8"): 22.49,
    ("table4a", "alpha=1.0"): 21.15,
    ("table4a", "alpha=1.25"): 34.98,
    ("table4a", "alpha=1.5"): 49.46,
    ("table4a", "alpha=1.75"): 66.45,
    ("table4a", "alpha=2.0"): 85.94,
    ("table4b", "d=1"): 21.15,
    ("table4b", "d=2"): 25.26,
    ("table4b", "d=3"): 29.38,
    ("table4b", "d=4"): 33.5,
    ("table6", "alpha=2.0,d=3"): 118.51,
}


def ablation_grid(base=None):
    """(table, label, ArchConfig) rows in the published ordering."""
    base = (base or ArchConfig()).replace(boosters=())
    rows = [("table2", "detail-only", base.replace(agg="detail")),
            ("table2", "semantic-only", base.replace(agg="semantic")),
            ("table2", "sum", base.replace(agg="sum")),
            ("table2", "concat", base.replace(agg="concat")),
            ("table2", "bga", base)]
    for label, lam in (("1/2", 0.5), ("1/4", 0.25), ("1/8", 0.125), ("1/16", 0.0625)):
        rows.append(("table3a", f"lam={label}", base.replace(lam=lam)))
    rows += [("table3b", "full", base),
             ("table3b", "no-context", base.replace(context=False)),
             ("table3b", "single-5x5-dw", base.replace(double_dw=False)),
             ("table3b", "1x1-gather", base.replace(gather_k=1))]
    for e in (1, 2, 4, 6, 8):
        rows.append(("table3c", f"e={e}", base.replace(expansion=e)))
    for a in (1.0, 1.25, 1.5, 1.75, 2.0):
        rows.append(("table4a", f"alpha={a}", base.replace(alpha=a)))
    for d in (1, 2, 3, 4):
        rows.append(("table4b", f"d={d}", base.replace(depth=d)))
    rows.append(("table6", "alpha=2.0,d=3", base.replace(alpha=2.0, depth=3)))
    return rows


@dataclass
class TableRow:
    table: str
    config: str
    gflops_model: float
    gflops_published: float | None
    params: int


def reproduce_tables(grid=None, input_hw=(512, 1024), convention="macs", include_head=True):
    """Model GFLOPs next to the published value for each grid row.

    ``grid`` is a list of ``(table, label, ArchConfig)``; defaults to
    :func:`ablation_grid`.  Parameter counts exclude booster heads.
    """
    rows = []
    for table, label, cfg in (grid if grid is not None else ablation_grid()):
        net = BiSeNetV2(cfg)
        rep = count_costs(net, input_hw, convention, include_head)
        rows.append(TableRow(table, label, rep.gflops, PUBLISHED_GFLOPS.get((table, label)),
                             count_params(net)))
    return rows


def tables_to_csv(rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    # header names are a fixed file format
    wr.writerow(["config", "gflops_model", "gflops_paper", "params"])
    for r in rows:
        wr.writerow([f"{r.table}:{r.config}", f"{r.gflops_model:.4f}",
                     "" if r.gflops_published is None else f"{r.gflops_published:g}", r.params])
    return buf.getvalue()


def tables_to_text(rows, convention, input_hw, include_head):
    lines = [f"# convention={convention} input_hw={input_hw[0]}x{input_hw[1]} "
             f"include_head={include_head}; 'published' is the reference GFLOPs column",
             f"{'config':<28}{'model':>12}{'published':>11}{'ratio':>8}{'params':>12}"]
    for r in rows:
        pub = "" if r.gflops_published is None else f"{r.gflops_published:.2f}"
        ratio = "" if r.gflops_published is None else f"{r.gflops_model / r.gflops_published:.2f}"
        lines.append(f"{r.table + ':' + r.config:<28}{r.gflops_model:>12.2f}{pub:>11}"
                     f"{ratio:>8}{r.params:>12,}")
    return "\n".join(lines) + "\n"


def booster_params(net):
    """Parameter count of the booster heads alone."""
    return count_params(net.aux_heads)


__all__ = ["CONVENTIONS", "CostReport", "LayerCost", "count_costs", "count_params",
           "reproduce_tables", "ablation_grid", "PUBLISHED_GFLOPS", "TableRow", "tables_to_csv",
           "tables_to_text", "booster_params"]
