"""Reference implementations written independently of the package code.

They favour obviousness over speed: explicit loops, closed-form formulas and
a hand enumeration of the architecture's convolutions.
"""
import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0, groups=1):
    n, c_in, h, wd = x.shape
    c_out, cpg, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out_per_group = c_out // groups
    y = np.zeros((n, c_out, ho, wo))
    for bi in range(n):
        for co in range(c_out):
            g = co // out_per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for u in range(k):
                            for v in range(k):
                                acc += (xp[bi, g * cpg + ci, i * stride + u, j * stride + v]
                                        * w[co, ci, u, v])
                    y[bi, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return y


def pool_loops(x, k, stride, pad, kind):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    y = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            vals = []
            for u in range(k):
                for v in range(k):
                    r, s = i * stride + u - pad, j * stride + v - pad
                    if 0 <= r < h and 0 <= s < w:
                        vals.append(x[:, :, r, s])
            stack = np.stack(vals)
            y[:, :, i, j] = stack.max(0) if kind == "max" else stack.mean(0)
    return y


def bilinear_point(img, y, x):
    """Sample a 2-D array at fractional (y, x) with edge clamping."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def resize_bilinear_points(img, ho, wo):
    h, w = img.shape
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[i, j] = bilinear_point(img, (i + 0.5) * h / ho - 0.5, (j + 0.5) * w / wo - 0.5)
    return out


def ohem_sort_oracle(prob, valid, threshold, min_kept):
    """Kept flat indices: below-threshold pixels, or the min_kept hardest
    (ties to the smaller flat index) when too few qualify."""
    p = prob.reshape(-1)
    v = valid.reshape(-1)
    cand = [i for i in range(p.size) if v[i]]
    if threshold >= 1:
        return set(cand)
    hard = {i for i in cand if p[i] < threshold}
    if len(hard) >= min_kept:
        return hard
    ranked = sorted(cand, key=lambda i: (p[i], i))
    return set(ranked[:min_kept])


def softmax_ce_loops(logits, labels, ignore):
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                t = labels[b, i, j]
                if t == ignore:
                    continue
                z = logits[b, :, i, j]
                m = z.max()
                total += -(z[t] - m - math.log(sum(math.exp(v - m) for v in z)))
                count += 1
    return total / count if count else 0.0


# --- double-entry cost oracle ----------------------------------------------

def _r8(x):
    return max(8, 8 * int(math.floor(x / 8 + 0.5)))


def _r4(x):
    return max(4, 4 * int(math.floor(x / 4 + 0.5)))


def conv_macs(k, c_in, c_out, ho, wo, groups=1):
    return k * k * (c_in // groups) * c_out * ho * wo


def network_macs(H, W, lam=0.25, e=6, alpha=1.0, d=1, detail=(64, 64, 128), agg="bga",
                 num_classes=19, ct=None, context=True, gather_k=3, double_dw=True):
    """Convolution MACs of the inference graph, enumerated layer by layer."""
    d1, d2, d3 = (_r8(alpha * c) for c in detail)
    stem = _r4(lam * alpha * detail[0])
    c3 = _r8(lam * alpha * detail[2])
    c4, c5 = _r8(alpha * 64), _r8(alpha * 128)
    ct = ct if ct is not None else _r8(1024 * alpha)
    h2, w2, h4, w4 = H // 2, W // 2, H // 4, W // 4
    h8, w8, h16, w16, h32, w32 = H // 8, W // 8, H // 16, W // 16, H // 32, W // 32
    total = 0
    if agg != "semantic":
        total += conv_macs(3, 3, d1, h2, w2) + conv_macs(3, d1, d1, h2, w2)
        total += conv_macs(3, d1, d2, h4, w4) + 2 * conv_macs(3, d2, d2, h4, w4)
        total += conv_macs(3, d2, d3, h8, w8) + 2 * conv_macs(3, d3, d3, h8, w8)
    if agg != "detail":
        total += conv_macs(3, 3, stem, h2, w2) + conv_macs(1, stem, stem // 2, h2, w2)
        total += conv_macs(3, stem // 2, stem, h4, w4) + conv_macs(3, 2 * stem, stem, h4, w4)

        def ge2(ci, co, h, w):
            mid = ci * e
            m = conv_macs(gather_k, ci, mid, h, w)
            if double_dw:
                m += conv_macs(3, mid, mid, h // 2, w // 2, mid) * 2
            else:
                m += conv_macs(5, mid, mid, h // 2, w // 2, mid)
            m += conv_macs(1, mid, co, h // 2, w // 2)
            m += conv_macs(3, ci, ci, h // 2, w // 2, ci) + conv_macs(1, ci, co, h // 2, w // 2)
            return m

        def ge1(c, h, w):
            mid = c * e
            return (conv_macs(gather_k, c, mid, h, w) + conv_macs(3, mid, mid, h, w, mid)
                    + conv_macs(1, mid, c, h, w))

        total += ge2(stem, c3, h4, w4) + d * ge1(c3, h8, w8)
        total += ge2(c3, c4, h8, w8) + d * ge1(c4, h16, w16)
        total += ge2(c4, c5, h16, w16) + 3 * d * ge1(c5, h32, w32)
        if context:
            total += conv_macs(1, c5, c5, 1, 1) + conv_macs(3, c5, c5, h32, w32)
    if agg == "bga":
        c = d3
        total += conv_macs(3, c, c, h8, w8, c) + conv_macs(1, c, c, h8, w8)
        total += conv_macs(3, c, c, h16, w16)
        total += conv_macs(3, c, c, h32, w32)
        total += conv_macs(3, c, c, h32, w32, c) + conv_macs(1, c, c, h32, w32)
        total += conv_macs(3, c, c, h8, w8)
        head_in, hh, hw = c, h8, w8
    elif agg in ("sum", "concat"):
        total += conv_macs(3, d3, d3, h8, w8, d3) + conv_macs(1, d3, d3, h8, w8)
        total += conv_macs(3, c5, c5, h32, w32, c5) + conv_macs(1, c5, d3, h32, w32)
        head_in, hh, hw = (2 * d3 if agg == "concat" else d3), h8, w8
    elif agg == "detail":
        head_in, hh, hw = d3, h8, w8
    else:
        head_in, hh, hw = c5, h32, w32
    total += conv_macs(3, head_in, ct, hh, hw) + conv_macs(1, ct, num_classes, hh, hw)
    return total


def stem_params(c, c_in=3):
    """Parameters of the stem: four convs (no bias) each followed by BN (2 per channel)."""
    return (9 * c_in * c + 2 * c) + (c * (c // 2) + 2 * (c // 2)) \
        + (9 * (c // 2) * c + 2 * c) + (9 * 2 * c * c + 2 * c)
