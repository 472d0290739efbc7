"""A short training run on synthetic scenes.

Three classes: background, rectangles and disks.  The full toy run in
configs/toy.cfg uses 300 iterations; pass a number on the command line
to change the default of 60 used here.
"""
import sys

from bisenet import ArchConfig, TrainConfig, build_bisenetv2, synth_dataset, train_loop
from bisenet.train import moving_average_windows, pixel_accuracy

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 60

arch = ArchConfig(alpha=0.25, num_classes=3, input_hw=(64, 64), ct_main=64, ct_aux=32)
cfg = TrainConfig(batch=4, max_iter=iters, crop_hw=(64, 64), seed=0)

train = synth_dataset(cfg.seed, cfg.n_samples, 3, 64, 64)
held_out = synth_dataset(cfg.seed + 1, 50, 3, 64, 64)

net = build_bisenetv2(arch).initialize(cfg.seed)
print("accuracy before:", round(pixel_accuracy(net, held_out), 4))


def log(row):
    if row["iter"] % 10 == 0:
        print(f"  iter {row['iter']:>4}  lr {row['lr']:.4f}  loss {row['loss']:.3f}")


history = train_loop(net, train, cfg, log=log)

# Individual steps are noisy; windowed means should fall.
window = max(1, iters // 6)
means = moving_average_windows([h["loss"] for h in history], window)
print("loss window means:", [round(float(m), 3) for m in means])
print("accuracy after:", round(pixel_accuracy(net, held_out), 4))
