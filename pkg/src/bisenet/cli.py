"""``bisenet`` command line.

Exit codes: 0 ok, 1 compare difference above tolerance, 2 usage or
configuration error, 3 numeric failure, 4 checkpoint mismatch.
``BISENET_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, load_config, parse_hw
from .errors import CheckpointMismatch, ConfigError, NumericError, StateError
from .io import image_to_tensor, labels_to_pgm, load_bt2, read_pnm, save_bt2
from .model import TAP_NAMES, build_bisenetv2, forward_inference
from .tensor import Tensor, no_grad
from .train import history_to_csv, synth_dataset, train_loop

EXIT_OK, EXIT_DIFF, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
GOLDEN_TAPS = ("input",) + TAP_NAMES + ("logits",)


def _hw(text):
    try:
        return parse_hw(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _config(path):
    return load_config(path) if path else RunConfig()


def _out_dir(args, cfg):
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_analyze(args):
    cfg = _config(args.config)
    arch = cfg.arch
    hw = args.input_hw or arch.input_hw
    out = _out_dir(args, cfg)
    net = build_bisenetv2(arch)
    include_head = not args.no_head
    report = analysis.count_costs(net, hw, args.convention, include_head)
    (out / "costs.txt").write_text(report.to_text())
    (out / "costs.csv").write_text(report.to_csv())
    if args.grid is None or args.grid == "":
        grid = [("config", arch.agg, arch)]
    else:
        wanted = None if args.grid == "all" else set(args.grid.split(","))
        grid = [row for row in analysis.ablation_grid(arch)
                if wanted is None or row[0] in wanted]
        if not grid:
            raise ConfigError(f"--grid selects no tables: {args.grid!r}")
    rows = analysis.reproduce_tables(grid, hw, args.convention, include_head)
    (out / "tables.csv").write_text(analysis.tables_to_csv(rows))
    text = analysis.tables_to_text(rows, args.convention, hw, include_head)
    (out / "tables.txt").write_text(text)
    print(text, end="")
    print(f"total {args.convention}: {report.totals['flops']:,} "
          f"({report.gflops:.3f} G); params {report.totals['params']:,}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args.config)
    out = _out_dir(args, cfg)
    arch, tc = cfg.arch, cfg.train
    net = build_bisenetv2(arch)
    net.initialize(tc.seed, np.float64 if args.float64 else np.float32)
    data = synth_dataset(tc.seed, tc.n_samples, arch.num_classes, *arch.input_hw)
    ckpt = out / cfg.checkpoint

    def periodic(n, it):
        save_checkpoint(n, out / f"{cfg.checkpoint}_iter{it}")

    def log(e):
        print(f"iter {e['iter']:6d} lr {e['lr']:.5f} loss {e['loss']:.4f}")

    history = train_loop(net, data, tc, on_checkpoint=periodic,
                         log=log if args.verbose else None)
    save_checkpoint(net, ckpt)
    (out / "history.csv").write_text(history_to_csv(history))
    (out / "config.txt").write_text(format_config(cfg))
    final = history[-1]["loss"] if history else float("nan")
    print(f"trained {tc.max_iter} iterations; final loss {final:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(args):
    if args.expect_hash is None and args.config:
        args.expect_hash = build_bisenetv2(load_config(args.config).arch).arch_hash()
    net = load_checkpoint(args.checkpoint, args.expect_hash)
    pixels, maxval = read_pnm(args.image)
    x = image_to_tensor(pixels, maxval).astype(net.parameters()[0].data.dtype)
    labels, logits = forward_inference(net, x, args.infer_hw)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(labels_to_pgm(labels[0]))
    if args.logits:
        save_bt2(args.logits, logits.data)
    print(f"wrote {labels.shape[2]}x{labels.shape[1]} label map to {out}")
    return EXIT_OK


def golden_input(seed, hw, dtype):
    rng = np.random.default_rng(seed)
    return rng.random((1, 3, *hw)).astype(dtype)


def cmd_dump_golden(args):
    cfg = _config(args.config)
    taps = [t for t in args.taps.split(",") if t] if args.taps else list(GOLDEN_TAPS)
    unknown = [t for t in taps if t not in GOLDEN_TAPS]
    if unknown:
        raise ConfigError(f"unknown tap(s) {unknown}; choose from {', '.join(GOLDEN_TAPS)}")
    dtype = np.float64 if args.float64 else np.float32
    hw = args.input_hw or cfg.arch.input_hw
    net = build_bisenetv2(cfg.arch).initialize(args.seed, dtype).eval()
    x = golden_input(args.seed, hw, dtype)
    with no_grad():
        logits, _, found = net.forward_all(Tensor(x), with_aux=False)
    found = {k: v.data for k, v in found.items()}
    found.update(input=x, logits=logits.data)
    missing = [t for t in taps if t not in found]
    if missing:
        raise ConfigError(f"tap(s) {missing} do not exist for agg={cfg.arch.agg!r}")
    out = _out_dir(args, cfg)
    for t in taps:
        save_bt2(out / f"{t}.bt2", found[t])
    print(f"dumped {len(taps)} tap(s) to {out}")
    return EXIT_OK


def _pairs(a, b):
    a, b = Path(a), Path(b)
    if a.is_dir() != b.is_dir():
        raise ConfigError("compare needs two files or two directories")
    if not a.is_dir():
        return [(a.name, a, b)]
    names = sorted(p.name for p in a.glob("*.bt2"))
    other = sorted(p.name for p in b.glob("*.bt2"))
    if names != other:
        raise ConfigError(f"directories hold different tensors: {names} vs {other}")
    return [(n, a / n, b / n) for n in names]


def compare_tensors(a, b):
    """Max absolute difference and the (name, index) where it occurs."""
    worst = (0.0, None, None)
    for name, pa, pb in _pairs(a, b):
        x, y = load_bt2(pa).astype(np.float64), load_bt2(pb).astype(np.float64)
        if x.shape != y.shape:
            raise ConfigError(f"{name}: shapes differ {x.shape} vs {y.shape}")
        if x.size == 0:
            continue
        d = np.abs(x - y)
        d[np.isnan(d)] = np.inf
        idx = np.unravel_index(int(np.argmax(d)), d.shape)
        if d[idx] > worst[0] or worst[1] is None:
            worst = (float(d[idx]), name, tuple(int(i) for i in idx))
    return worst


def cmd_compare(args):
    diff, name, idx = compare_tensors(args.a, args.b)
    where = f" at {name}{list(idx)}" if diff > 0 else ""
    print(f"max abs diff {diff:.6g}{where}")
    return EXIT_OK if diff <= args.tol else EXIT_DIFF


def build_parser():
    p = argparse.ArgumentParser(prog="bisenet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="cost report and ablation tables")
    a.add_argument("config", nargs="?")
    a.add_argument("--input-hw", type=_hw)
    a.add_argument("--convention", choices=analysis.CONVENTIONS, default="macs")
    a.add_argument("--grid", nargs="?", const="all",
                   help="comma list of tables (table2,...); bare flag = all")
    a.add_argument("--no-head", action="store_true", help="exclude the main head")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)

    t = sub.add_parser("train", help="train on synthetic shapes")
    t.add_argument("config", nargs="?")
    t.add_argument("--out")
    t.add_argument("--float64", action="store_true")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="label a P5/P6 image")
    i.add_argument("checkpoint")
    i.add_argument("image")
    i.add_argument("--out", required=True)
    i.add_argument("--logits")
    i.add_argument("--infer-hw", type=_hw)
    i.add_argument("--config", help="require the checkpoint to match this config")
    i.add_argument("--expect-hash")
    i.set_defaults(fn=cmd_infer)

    g = sub.add_parser("dump-golden", help="write tap tensors as BT2 files")
    g.add_argument("config", nargs="?")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--taps", help=f"comma list from: {','.join(GOLDEN_TAPS)}")
    g.add_argument("--input-hw", type=_hw)
    g.add_argument("--float64", action="store_true")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_dump_golden)

    c = sub.add_parser("compare", help="max abs difference of BT2 files or directories")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=0.0)
    c.set_defaults(fn=cmd_compare)
    return p


def _thread_limit():
    n = os.environ.get("BISENET_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise ConfigError(f"BISENET_THREADS must be an integer, got {n!r}") from None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        with _thread_limit():
            return args.fn(args)
    except NumericError as exc:
        print(f"bisenet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as exc:
        print(f"bisenet: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, StateError, FileNotFoundError) as exc:
        print(f"bisenet: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
