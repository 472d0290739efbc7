"""Shapes and costs of the default network.

Nothing here touches real weights: the shape pass and the cost counter
both run on meta tensors, so even the full 512x1024 input is instant.
"""
from bisenet import ArchConfig, build_bisenetv2, count_costs, count_params
from bisenet.analysis import ablation_grid, reproduce_tables, tables_to_text

net = build_bisenetv2()
print(net.cfg)
print("parameters:", count_params(net))

# Every named tap, from the stem to the logits.
for name, shape in net.tap_shapes((512, 1024)).items():
    print(f"  {name:<10} {shape}")

# MACs are the default convention; "flops" doubles them and adds the
# elementwise work (BN, ReLU, sigmoid, products, resizes).
for convention in ("macs", "flops"):
    rep = count_costs(net, (512, 1024), convention)
    print(f"{convention:>5}: {rep.totals[convention] / 1e9:.2f} G")

# Head off: only the trunk is counted.
trunk = count_costs(net, (512, 1024), include_head=False)
print("trunk MACs:", round(trunk.totals["macs"] / 1e9, 2), "G")

# Width scales the cost roughly quadratically.
wide = count_costs(build_bisenetv2(ArchConfig(alpha=2.0)), (512, 1024))
ratio = wide.totals["macs"] / count_costs(net, (512, 1024)).totals["macs"]
print(f"alpha 2.0 / alpha 1.0 = {ratio:.3f}")

# The aggregation study next to the published complexity column.
rows = reproduce_tables([r for r in ablation_grid() if r[0] == "table2"])
print(tables_to_text(rows, "macs", (512, 1024), True))
