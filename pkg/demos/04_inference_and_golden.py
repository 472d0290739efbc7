"""Checkpoints, inference on an image file, and golden tensor dumps.

Everything is written to a temporary directory.  The command-line entry
point is called in-process through `bisenet.cli.main`, which takes the
same arguments as the `bisenet` console script.
"""
import tempfile
from pathlib import Path

import numpy as np

from bisenet import ArchConfig, build_bisenetv2, load_checkpoint, save_checkpoint
from bisenet.cli import main
from bisenet.io import load_bt2, read_pnm, write_pnm

tmp = Path(tempfile.mkdtemp())

arch = ArchConfig(alpha=0.25, num_classes=3, input_hw=(64, 64), ct_main=16, ct_aux=8)
net = build_bisenetv2(arch).initialize(0)
save_checkpoint(net, tmp / "ckpt")
print((tmp / "ckpt" / "manifest.txt").read_text().splitlines()[:3])

# Loading checks the architecture hash, the module tree and every shape.
restored = load_checkpoint(tmp / "ckpt", expected_hash=net.arch_hash())
print("restored", type(restored).__name__, "hash", restored.arch_hash()[:12])

# Any size works; the label map comes back at the input size.
img = np.random.default_rng(0).integers(0, 256, (48, 80, 3)).astype(np.uint8)
write_pnm(tmp / "in.ppm", img)
code = main(["infer", str(tmp / "ckpt"), str(tmp / "in.ppm"), "--infer-hw", "64x96",
             "--out", str(tmp / "labels.pgm"), "--logits", str(tmp / "logits.bt2")])
labels, _ = read_pnm(tmp / "labels.pgm")
print("infer exit", code, "labels", labels.shape, "logits", load_bt2(tmp / "logits.bt2").shape)

# Golden dumps: one .bt2 file per tap, same seed, two precisions.
cfg = tmp / "toy.cfg"
cfg.write_text("alpha = 0.25\nnum_classes = 3\ninput_hw = 64x64\nct_main = 16\nct_aux = 8\n")
main(["dump-golden", str(cfg), "--taps", "stage3,logits", "--out", str(tmp / "f32")])
main(["dump-golden", str(cfg), "--taps", "stage3,logits", "--float64", "--out", str(tmp / "f64")])
print(sorted(p.name for p in (tmp / "f32").iterdir()))

# Exit code 0 within tolerance, 1 beyond it.
print("compare exit", main(["compare", str(tmp / "f32"), str(tmp / "f64"), "--tol", "1e-4"]))
print("compare exit", main(["compare", str(tmp / "f32"), str(tmp / "f64"), "--tol", "1e-12"]))
