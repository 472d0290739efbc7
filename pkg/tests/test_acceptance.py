"""The nine acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line in ``RESULTS``; the conftest hook
prints them after the run.
"""
import time
from contextlib import contextmanager

import numpy as np
import pytest

from bisenet import ops
from bisenet.analysis import PUBLISHED_GFLOPS, count_costs, reproduce_tables, tables_to_text
from bisenet.checkpoint import checkpoints_equal, load_checkpoint, save_checkpoint
from bisenet.gradcheck import grad_check
from bisenet.io import encode_bt2
from bisenet.model import ArchConfig, BiSeNetV2, attach_boosters, build_bisenetv2, forward_inference
from bisenet.tensor import Tensor
from bisenet.train import (TrainConfig, correct_class_prob, cross_entropy, moving_average_windows,
                           ohem_cross_entropy, ohem_select, pixel_accuracy, synth_dataset,
                           total_loss, train_loop)

from oracles import conv2d_loops, network_macs, ohem_sort_oracle
from test_blocks import BLOCKS, _prepare
from test_ops import GRAD_CASES

RESULTS = []


@contextmanager
def criterion(n, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        RESULTS.append(f"[{n}] FAIL {title}: {exc!s:.200}")
        print(RESULTS[-1])
        raise
    info = ", ".join(f"{k}={v}" for k, v in detail.items())
    RESULTS.append(f"[{n}] PASS {title}" + (f" ({info})" if info else ""))
    print(RESULTS[-1])


# 1 -----------------------------------------------------------------------------

TABLE1 = {
    "detail_s1": (1, 64, 256, 512), "detail_s2": (1, 64, 128, 256),
    "detail_s3": (1, 128, 64, 128), "stage2": (1, 16, 128, 256),
    "stage3": (1, 32, 64, 128), "stage4": (1, 64, 32, 64),
    "stage5_4": (1, 128, 16, 32), "stage5_5": (1, 128, 16, 32),
}


def test_1_shape_oracle():
    with criterion(1, "tap shapes equal the structural table at 512x1024") as d:
        t0 = time.perf_counter()
        shapes = build_bisenetv2().tap_shapes((512, 1024))  # build + meta pass
        elapsed = time.perf_counter() - t0
        for tap, want in TABLE1.items():
            assert shapes[tap] == want, f"{tap}: {shapes[tap]} != {want}"
        assert elapsed < 1.0, f"shape pass took {elapsed:.2f}s"
        d["seconds"] = f"{elapsed:.3f}"


# 2 -----------------------------------------------------------------------------

def _totals(convention, **kw):
    return count_costs(BiSeNetV2(ArchConfig(boosters=(), **kw)), (512, 1024),
                       convention).totals["flops"]


@pytest.mark.parametrize("convention", ["macs", "flops"])
def test_2_flops_trends(convention):
    with criterion(2, f"complexity trends hold under the {convention} convention") as d:
        ratio = _totals(convention, alpha=2.0) / _totals(convention)
        assert 3.6 <= ratio <= 4.4, f"alpha ratio {ratio:.3f}"
        lam = [_totals(convention, lam=v) for v in (1 / 16, 1 / 8, 1 / 4, 1 / 2)]
        assert all(a < b for a, b in zip(lam, lam[1:])), lam
        eps = [_totals(convention, expansion=e) for e in (1, 2, 4, 6, 8)]
        assert all(a < b for a, b in zip(eps, eps[1:])), eps
        ds = np.array([1, 2, 3, 4.0])
        f = np.array([_totals(convention, depth=int(v)) for v in ds])
        fit = np.polyval(np.polyfit(ds, f, 1), ds)
        resid = np.max(np.abs(f - fit) / f)
        assert resid <= 0.10 and f[1] > f[0], f"affine residual {resid:.3g}"
        concat, bga, sm = (_totals(convention, agg=a) for a in ("concat", "bga", "sum"))
        assert concat > bga > sm, (concat, bga, sm)
        d.update(alpha_ratio=f"{ratio:.3f}", depth_residual=f"{resid:.1e}",
                 bga_G=f"{bga / 1e9:.2f}", published_G=PUBLISHED_GFLOPS[("table2", "bga")])
    rows = reproduce_tables(convention=convention)
    print(tables_to_text(rows, convention, (512, 1024), True))


# 3 -----------------------------------------------------------------------------

def test_3_gradients():
    with criterion(3, "finite-difference gradients of ops, blocks and the tiny network") as d:
        t0 = time.perf_counter()
        worst_op = 0.0
        for name, (fn, shapes) in GRAD_CASES.items():
            r = np.random.default_rng(11)
            inputs = [Tensor(r.standard_normal(s)) for s in shapes]
            err = grad_check(fn, inputs)
            assert err <= 1e-4, f"op {name}: {err:.2e}"
            worst_op = max(worst_op, err)
        x = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        worst_op = max(worst_op, grad_check(lambda t: ops.relu(t[0]), [Tensor(x)]))
        assert worst_op <= 1e-4

        worst_block = 0.0
        for name, (make, shapes) in BLOCKS.items():
            block = _prepare(make())
            r = np.random.default_rng(12)
            xs = [Tensor(r.standard_normal(s)) for s in shapes]
            err = grad_check(lambda t, n=len(xs), b=block: b(*t[:n]), xs + block.parameters(),
                             max_coords=40)
            assert err <= 1e-4, f"block {name}: {err:.2e}"
            worst_block = max(worst_block, err)

        cfg = ArchConfig(alpha=1 / 16, num_classes=3, input_hw=(32, 64), ct_main=8, ct_aux=8)
        net = _prepare(build_bisenetv2(cfg), seed=2)
        assert max(cfg.detail_widths + cfg.semantic_widths) <= 8
        r = np.random.default_rng(4)
        x = Tensor(r.random((2, 3, 32, 64)))
        labels = r.integers(0, 3, (2, 32, 64))
        tc = TrainConfig(ohem=False)

        def loss(t):
            logits, aux, _ = net.forward_all(t[0], with_aux=True)
            return total_loss(logits, aux, labels, tc)[0]

        worst_net = grad_check(loss, [x] + net.parameters(), max_coords=4)
        assert worst_net <= 1e-3, f"network: {worst_net:.2e}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 300
        d.update(op=f"{worst_op:.1e}", block=f"{worst_block:.1e}", net=f"{worst_net:.1e}",
                 seconds=f"{elapsed:.0f}")


# 4 -----------------------------------------------------------------------------

def test_4_oracle_equivalence():
    with criterion(4, "conv kernel vs nested loops; cost totals vs double-entry oracle") as d:
        r = np.random.default_rng(2024)
        worst = 0.0
        for case in range(50):
            depthwise = case % 2 == 1
            c = int(r.integers(1, 5))
            c_out = c if depthwise else int(r.integers(1, 5))
            k = int(r.choice([1, 3, 5]))
            stride = int(r.integers(1, 3))
            pad = int(r.integers(0, k // 2 + 1))
            h, w = (int(v) for v in r.integers(k, 9, 2))
            x = r.standard_normal((int(r.integers(1, 3)), c, h, w))
            groups = c if depthwise else 1
            wt = r.standard_normal((c_out, c // groups, k, k))
            b = r.standard_normal(c_out) if case % 3 == 0 else None
            got = ops.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b),
                             stride, pad, groups).data
            worst = max(worst, np.max(np.abs(got - conv2d_loops(x, wt, b, stride, pad, groups))))
        assert worst <= 1e-6, worst
        for kw, okw in [({}, {}), ({"agg": "sum"}, {"agg": "sum"}),
                        ({"agg": "concat"}, {"agg": "concat"}),
                        ({"alpha": 2.0, "depth": 3}, {"alpha": 2.0, "d": 3}),
                        ({"lam": 0.5, "expansion": 4}, {"lam": 0.5, "e": 4})]:
            got = count_costs(BiSeNetV2(ArchConfig(**kw)), (512, 1024)).totals["macs"]
            assert got == network_macs(512, 1024, **okw), kw
        d["conv_max_abs_err"] = f"{worst:.1e}"


# 5 -----------------------------------------------------------------------------

def test_5_booster_neutrality():
    with criterion(5, "eval logits bitwise independent of booster heads"):
        cfg = ArchConfig(alpha=0.25, num_classes=3, input_hw=(64, 64), ct_main=16, ct_aux=8)
        x = Tensor(np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32))
        with_b = build_bisenetv2(cfg).initialize(0)
        # exercise BN statistics through the trunk with boosters active
        train_loop(with_b, synth_dataset(0, 4, 3, 64, 64), TrainConfig(max_iter=2))
        a = with_b.eval()(x).data.tobytes()
        attach_boosters(with_b, ())
        b = with_b.eval()(x).data.tobytes()
        assert a == b
        fresh_a = build_bisenetv2(cfg).initialize(5).eval()(x).data.tobytes()
        fresh_b = build_bisenetv2(cfg.replace(boosters=())).initialize(5).eval()(x).data.tobytes()
        assert fresh_a == fresh_b


# 6 -----------------------------------------------------------------------------

def test_6_ohem_degeneration():
    with criterion(6, "OHEM threshold 1 equals cross-entropy; min_kept equals sort oracle") as d:
        r = np.random.default_rng(6)
        worst = 0.0
        for _ in range(50):
            n, c, h, w = (int(v) for v in r.integers(1, 6, 4))
            c += 1
            logits = r.standard_normal((n, c, h, w)) * 3
            labels = r.integers(0, c, (n, h, w))
            labels[r.random((n, h, w)) < 0.1] = 255
            if not (labels != 255).any():
                labels[0, 0, 0] = 0
            a = ohem_cross_entropy(Tensor(logits), labels, 1.0, int(r.integers(1, 20))).data[0]
            b = cross_entropy(Tensor(logits), labels).data[0]
            worst = max(worst, abs(a - b))
            p, valid = correct_class_prob(Tensor(logits), labels)
            thr, mk = float(r.uniform(0.05, 0.95)), int(r.integers(1, n * h * w + 1))
            keep = ohem_select(p, valid, thr, mk)
            assert set(np.flatnonzero(keep)) == ohem_sort_oracle(p, valid, thr, mk)
        assert worst <= 1e-7
        d["max_abs_diff"] = f"{worst:.1e}"


# 7, 8, 9 -------------------------------------------------------------------------

TOY_ARCH = dict(alpha=0.25, num_classes=3, input_hw=(64, 64), ct_main=64, ct_aux=32)
TOY_TRAIN = TrainConfig(batch=4, max_iter=300, crop_hw=(64, 64), seed=0)


def _run(agg):
    net = build_bisenetv2(ArchConfig(agg=agg, **TOY_ARCH)).initialize(TOY_TRAIN.seed)
    data = synth_dataset(0, TOY_TRAIN.n_samples, 3, 64, 64)
    t0 = time.perf_counter()
    history = train_loop(net, data, TOY_TRAIN)
    return net, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy_runs():
    return {}


def _get(toy_runs, agg):
    if agg not in toy_runs:
        toy_runs[agg] = _run(agg)
    return toy_runs[agg]


@pytest.mark.slow
def test_7_toy_training(toy_runs, tmp_path):
    with criterion(7, "toy training: loss falls, >= 90% held-out accuracy, deterministic") as d:
        net, history, secs = _get(toy_runs, "bga")
        windows = moving_average_windows([h["loss"] for h in history], 50)
        assert len(windows) == 6
        assert all(a > b for a, b in zip(windows, windows[1:])), windows
        acc = pixel_accuracy(net, synth_dataset(1, 20, 3, 64, 64))
        assert acc >= 0.90, f"accuracy {acc:.4f}"
        again, history2, secs2 = _run("bga")
        assert history == history2
        save_checkpoint(net, tmp_path / "a")
        save_checkpoint(again, tmp_path / "b")
        assert checkpoints_equal(tmp_path / "a", tmp_path / "b")
        assert secs + secs2 < 600 * 2
        d.update(accuracy=f"{acc:.4f}", windows=np.round(windows, 3).tolist(),
                 seconds_per_run=f"{secs:.0f}")


@pytest.mark.slow
@pytest.mark.parametrize("agg", ["sum", "concat", "bga"])
def test_8_aggregation_variants_train(toy_runs, agg):
    with criterion(8, f"{agg} aggregation completes the toy run with finite losses") as d:
        net, history, _ = _get(toy_runs, agg)
        assert len(history) == TOY_TRAIN.max_iter
        assert all(np.isfinite(h["loss"]) for h in history)
        d["final_loss"] = f"{history[-1]['loss']:.3f}"


@pytest.mark.slow
def test_9_checkpoint_round_trip(toy_runs, tmp_path):
    with criterion(9, "save, load, infer gives bitwise-identical logits dumps"):
        net, _, _ = _get(toy_runs, "bga")
        save_checkpoint(net, tmp_path / "ckpt")
        back = load_checkpoint(tmp_path / "ckpt")
        img = synth_dataset(2, 1, 3, 64, 64)[0].image[None]
        _, la = forward_inference(net, img)
        _, lb = forward_inference(back, img)
        assert encode_bt2(la.data) == encode_bt2(lb.data)
