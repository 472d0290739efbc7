import csv
import io

import numpy as np
import pytest

from bisenet.analysis import (PUBLISHED_GFLOPS, ablation_grid, booster_params, count_costs,
                              reproduce_tables, tables_to_csv)
from bisenet.errors import ConfigError
from bisenet.model import ArchConfig, BiSeNetV2, build_bisenetv2, count_params

from oracles import network_macs

ORACLE_KEYS = {"lam": "lam", "expansion": "e", "alpha": "alpha", "depth": "d", "agg": "agg",
               "num_classes": "num_classes", "ct_main": "ct", "context": "context",
               "gather_k": "gather_k", "double_dw": "double_dw"}


def macs(hw=(512, 1024), **kw):
    return count_costs(BiSeNetV2(ArchConfig(**kw)), hw).totals["macs"]


@pytest.mark.parametrize("kw", [{}, {"agg": "sum"}, {"agg": "concat"}, {"agg": "detail"},
                                {"agg": "semantic"}, {"alpha": 2.0, "depth": 3},
                                {"lam": 0.0625}, {"expansion": 1}, {"context": False},
                                {"double_dw": False}, {"gather_k": 1},
                                {"alpha": 0.25, "num_classes": 3, "ct_main": 64}])
@pytest.mark.parametrize("hw", [(512, 1024), (64, 64)])
def test_totals_match_double_entry_oracle(kw, hw):
    want = network_macs(*hw, **{ORACLE_KEYS[k]: v for k, v in kw.items()})
    assert macs(hw, **kw) == want


def test_per_layer_sums_equal_totals():
    rep = count_costs(build_bisenetv2(), (256, 512), "flops")
    assert rep.totals["flops"] == sum(r.flops for r in rep.per_layer)
    assert rep.totals["flops"] > 2 * rep.totals["macs"]  # elementwise ops add on top


def test_macs_convention_counts_convs_only():
    rep = count_costs(build_bisenetv2(), (64, 64), "macs")
    assert all(r.flops == 0 for r in rep.per_layer if r.op != "conv2d")


def test_cost_params_equal_registry_without_boosters():
    net = build_bisenetv2()
    assert count_costs(net).totals["params"] == count_params(net) - booster_params(net)


def test_head_exclusion():
    net = build_bisenetv2()
    full, trunk = count_costs(net), count_costs(net, include_head=False)
    head = network_macs(512, 1024) - network_macs(512, 1024, ct=0, num_classes=0)
    assert full.totals["macs"] - trunk.totals["macs"] == head


def test_unknown_convention():
    with pytest.raises(ConfigError):
        count_costs(build_bisenetv2(), convention="bogus")


def test_activation_bytes_use_four_bytes_per_value():
    rep = count_costs(build_bisenetv2(), (64, 64))
    last = rep.per_layer[-1]
    assert last.act_bytes == 19 * 64 * 64 * 4


def test_cost_is_independent_of_batch_norm_state():
    a = count_costs(build_bisenetv2()).totals
    b = count_costs(build_bisenetv2().initialize(0)).totals
    assert a == b


# --- published values and trends --------------------------------------------------

def test_published_values_transcribed():
    # spot checks against the published complexity columns
    assert PUBLISHED_GFLOPS[("table2", "bga")] == 21.15
    assert PUBLISHED_GFLOPS[("table2", "concat")] == 21.98
    assert PUBLISHED_GFLOPS[("table2", "sum")] == 20.77
    assert PUBLISHED_GFLOPS[("table4a", "alpha=2.0")] == 85.94
    assert PUBLISHED_GFLOPS[("table4b", "d=4")] == 33.5
    assert PUBLISHED_GFLOPS[("table3a", "lam=1/16")] == 19.61
    assert PUBLISHED_GFLOPS[("table3c", "e=8")] == 22.49


def test_published_trends_hold():
    p = PUBLISHED_GFLOPS
    assert p[("table2", "concat")] > p[("table2", "bga")] > p[("table2", "sum")]
    lams = [p[("table3a", f"lam={x}")] for x in ("1/16", "1/8", "1/4", "1/2")]
    assert lams == sorted(lams)
    assert 3.6 <= p[("table4a", "alpha=2.0")] / p[("table4a", "alpha=1.0")] <= 4.4


def test_grid_covers_every_published_row():
    keys = {(t, label) for t, label, _ in ablation_grid()}
    assert keys == set(PUBLISHED_GFLOPS)


def test_reproduce_tables_csv_format():
    grid = [r for r in ablation_grid() if r[0] == "table2"]
    rows = reproduce_tables(grid, (64, 128))
    parsed = list(csv.reader(io.StringIO(tables_to_csv(rows))))
    assert parsed[0] == ["config", "gflops_model", "gflops_paper", "params"]
    bga = [r for r in parsed if r[0] == "table2:bga"][0]
    assert bga[2] == "21.15"
    assert float(bga[1]) == pytest.approx(network_macs(64, 128) / 1e9, abs=1e-4)


def test_alpha_scaling_is_quadratic():
    r = macs(alpha=2.0) / macs()
    assert 3.6 <= r <= 4.4


def test_depth_is_affine():
    vals = np.array([macs(depth=d) for d in (1, 2, 3, 4)], dtype=float)
    steps = np.diff(vals)
    assert (steps > 0).all() and np.ptp(steps) == 0  # exact, each repeat costs the same


def test_text_report_lists_every_layer():
    rep = count_costs(build_bisenetv2(), (64, 64))
    text = rep.to_text()
    assert text.count("\n") == len(rep.per_layer) + 3
    assert "TOTAL" in text
