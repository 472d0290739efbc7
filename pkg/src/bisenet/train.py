"""Toy-scale training: losses, OHEM, momentum SGD, poly LR, augmentation and a
synthetic shapes dataset."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .ops import interp_matrix, resize_nearest
from .tensor import Tensor, backward, make_output, no_grad


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 4
    base_lr: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    max_iter: int = 300
    ohem: bool = True
    ohem_threshold: float = 0.7
    ohem_min_kept: int | None = None
    scales: tuple = (0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
    crop_hw: tuple = (64, 64)
    ignore_index: int = 255
    aux_weight: float = 1.0
    ohem_aux: bool = True
    seed: int = 0
    n_samples: int = 200
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "crop_hw", tuple(int(v) for v in self.crop_hw))
        if not self.base_lr >= 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        if not self.power > 0:
            raise ConfigError(f"power must be positive, got {self.power}")
        if not 0 < self.ohem_threshold <= 1:
            raise ConfigError(f"ohem_threshold must lie in (0, 1], got {self.ohem_threshold}")
        if self.ohem_min_kept is not None and self.ohem_min_kept < 1:
            raise ConfigError(f"ohem_min_kept must be >= 1, got {self.ohem_min_kept}")
        if self.batch < 1 or self.max_iter < 0:
            raise ConfigError("batch must be >= 1 and max_iter >= 0")
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError(f"scales must be positive, got {self.scales}")

    @property
    def min_kept(self):
        if self.ohem_min_kept is not None:
            return self.ohem_min_kept
        return max(1, self.batch * self.crop_hw[0] * self.crop_hw[1] // 16)


# --- schedule and optimizer ----------------------------------------------

def poly_lr(it, cfg):
    """``base_lr * (1 - it / max_iter) ** power``."""
    if cfg.max_iter == 0:
        return cfg.base_lr
    if not 0 <= it <= cfg.max_iter:
        raise ConfigError(f"iteration {it} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1 - it / cfg.max_iter) ** cfg.power


def sgd_step(params, lr, cfg):
    """One momentum-SGD update, then clear gradients.

    ``v <- momentum * v + g + weight_decay * w`` (decay skipped for
    decay-exempt parameters), ``w <- w - lr * v``.
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay and not p.decay_exempt:
            g = g + cfg.weight_decay * p.data
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity = (cfg.momentum * p.velocity + g).astype(p.data.dtype)
        p.data = (p.data - lr * p.velocity).astype(p.data.dtype)
        p.grad = None


# --- losses ---------------------------------------------------------------

def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), z - np.log(e.sum(axis=1, keepdims=True))


def _check_labels(logits, labels, ignore_index):
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ConfigError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= c)):
        raise ConfigError(f"labels must lie in [0, {c}) or equal ignore_index")
    return labels, valid


def _masked_ce(logits, labels, keep, op):
    """Mean softmax cross-entropy over pixels where ``keep`` is true."""
    x = logits.data.astype(np.float64)
    prob, logp = _softmax(x)
    safe = np.where(keep, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(keep.sum())
    if count == 0:
        loss = 0.0
    else:
        loss = float(nll[keep].sum() / count)
    dtype = logits.data.dtype

    def backward_fn(g):
        if count == 0:
            return (np.zeros(logits.shape, dtype=dtype),)
        grad = prob.copy()
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * keep[:, None] / count
        return ((grad * float(g.reshape(-1)[0])).astype(dtype),)

    return make_output(np.array([loss]), (logits,), backward_fn, op)


def cross_entropy(logits, labels, ignore_index=255):
    """Mean softmax cross-entropy over non-ignored pixels (zero if none)."""
    labels, valid = _check_labels(logits, labels, ignore_index)
    return _masked_ce(logits, labels, valid, "cross_entropy")


def correct_class_prob(logits, labels, ignore_index=255):
    labels, valid = _check_labels(logits, labels, ignore_index)
    prob, _ = _softmax(logits.data.astype(np.float64))
    p = np.take_along_axis(prob, np.where(valid, labels, 0)[:, None], axis=1)[:, 0]
    return p, valid


def ohem_select(prob, valid, threshold, min_kept):
    """Mask of pixels kept by online hard example mining.

    Keeps valid pixels whose correct-class probability is below
    ``threshold`` (all valid pixels when ``threshold >= 1``).  If fewer than
    ``min_kept`` qualify, the ``min_kept`` valid pixels with the lowest
    probability are kept instead; ties go to the lower flattened index.
    """
    if threshold >= 1:
        return valid.copy()
    keep = valid & (prob < threshold)
    if keep.sum() >= min_kept:
        return keep
    flat_valid = np.flatnonzero(valid)
    order = np.argsort(prob.reshape(-1)[flat_valid], kind="stable")
    chosen = flat_valid[order[:min_kept]]
    keep = np.zeros(valid.size, dtype=bool)
    keep[chosen] = True
    return keep.reshape(valid.shape)


def ohem_cross_entropy(logits, labels, threshold=0.7, min_kept=1, ignore_index=255):
    p, valid = correct_class_prob(logits, labels, ignore_index)
    keep = ohem_select(p, valid, threshold, min_kept)
    return _masked_ce(logits, np.asarray(labels), keep, "ohem_cross_entropy")


def head_loss(logits, labels, cfg, use_ohem):
    if use_ohem:
        return ohem_cross_entropy(logits, labels, cfg.ohem_threshold, cfg.min_kept,
                                  cfg.ignore_index)
    return cross_entropy(logits, labels, cfg.ignore_index)


def total_loss(main_logits, aux_logits, labels, cfg):
    """Main-head loss plus ``aux_weight`` times each booster-head loss.

    Returns ``(loss tensor, {"main": float, "aux_<pos>": float, ...})``.
    """
    parts = {"main": head_loss(main_logits, labels, cfg, cfg.ohem)}
    for pos, logits in aux_logits.items():
        parts[f"aux_{pos}"] = head_loss(logits, labels, cfg, cfg.ohem and cfg.ohem_aux)
    terms = [parts["main"]] + [t for k, t in parts.items() if k != "main"]
    weights = [1.0] + [cfg.aux_weight] * (len(terms) - 1)
    value = sum(w * float(t.data[0]) for w, t in zip(weights, terms))
    out = make_output(np.array([value]), tuple(terms),
                      lambda g: tuple(g * w for w in weights), "total_loss")
    return out, {k: float(t.data[0]) for k, t in parts.items()}


# --- data -----------------------------------------------------------------

@dataclass
class SynthSample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    label: np.ndarray  # (h, w) int64

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ConfigError(f"label shape {self.label.shape} does not match image "
                              f"{self.image.shape}")


# Foreground hue per class (cycled); class 0 is the textured background.
_PALETTE = np.array([[0.85, 0.2, 0.15], [0.15, 0.35, 0.9], [0.2, 0.8, 0.25],
                     [0.9, 0.8, 0.1], [0.7, 0.2, 0.8], [0.1, 0.8, 0.8]])


def default_coverage(num_classes):
    """Target pixel fraction per class: half the image split over foreground classes."""
    fg = 0.5 / (num_classes - 1)
    return (0.5,) + (fg,) * (num_classes - 1)


def _shape_mask(kind, h, w, cy, cx, size, yy, xx):
    if kind == 0:
        hh, ww = size
        return (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= size[0] ** 2


def synth_sample(rng, num_classes, h, w, coverage):
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.45 + 0.1 * rng.standard_normal(3)
    grad = rng.uniform(-0.1, 0.1, 2)
    image = (base[:, None, None] + grad[0] * yy / h + grad[1] * xx / w
             + 0.06 * rng.standard_normal((3, h, w)))
    label = np.zeros((h, w), dtype=np.int64)
    area = h * w
    for cls in rng.permutation(np.arange(1, num_classes)):
        kind = (cls - 1) % 2  # rectangles and disks alternate
        color = _PALETTE[(cls - 1) % len(_PALETTE)]
        target = coverage[cls] * area
        for _ in range(64):
            have = int((label == cls).sum())
            deficit = target - have
            if deficit < 0.02 * target:
                break
            piece = min(deficit, rng.uniform(0.7, 1.0) * target)
            if kind == 0:
                aspect = rng.uniform(0.6, 1.6)
                size = (math.sqrt(piece * aspect), math.sqrt(piece / aspect))
            else:
                size = (math.sqrt(piece / math.pi),)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            mask = _shape_mask(kind, h, w, cy, cx, size, yy, xx) & (label == 0)
            label[mask] = cls
            tint = np.clip(color + 0.08 * rng.standard_normal(3), 0, 1)
            image[:, mask] = tint[:, None] + 0.04 * rng.standard_normal((3, int(mask.sum())))
    return SynthSample(np.clip(image, 0, 1).astype(np.float32), label)


def synth_dataset(seed, n_samples, num_classes, h, w, coverage=None):
    """Deterministic scenes of coloured rectangles and disks on a noisy background.

    Class 0 is background; class ``k >= 1`` is a rectangle (odd ``k``) or
    disk (even ``k``) with its own hue.  Shapes are added only over
    background until each class reaches its ``coverage`` pixel fraction.
    """
    if num_classes < 2:
        raise ConfigError(f"synthetic data needs at least 2 classes, got {num_classes}")
    coverage = tuple(coverage or default_coverage(num_classes))
    if len(coverage) != num_classes or sum(coverage[1:]) >= 1:
        raise ConfigError("coverage must give one fraction per class, foreground < 1")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, num_classes, h, w, coverage) for _ in range(n_samples)]


def _resize_image(img, size):
    ah, aw = interp_matrix(img.shape[1], size[0]), interp_matrix(img.shape[2], size[1])
    return (ah @ img.astype(np.float64) @ aw.T).astype(img.dtype)


def augment(sample, cfg, rng, flip=None):
    """Random horizontal flip, random rescale from ``cfg.scales`` and random
    crop to ``cfg.crop_hw``; pads with 0 (image) / ``ignore_index`` (label)."""
    image, label = sample.image, sample.label
    if flip is None:
        flip = rng.random() < 0.5
    if flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    s = cfg.scales[rng.integers(len(cfg.scales))]
    h, w = label.shape
    size = (max(1, int(round(h * s))), max(1, int(round(w * s))))
    if size != (h, w):
        image = _resize_image(image, size)
        label = resize_nearest(label, size)
    ch, cw = cfg.crop_hw
    ph, pw = max(ch - size[0], 0), max(cw - size[1], 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=cfg.ignore_index)
    top = rng.integers(label.shape[0] - ch + 1)
    left = rng.integers(label.shape[1] - cw + 1)
    return SynthSample(np.ascontiguousarray(image[:, top:top + ch, left:left + cw]),
                       np.ascontiguousarray(label[top:top + ch, left:left + cw]))


# --- loop -----------------------------------------------------------------

def _first_nonfinite(logits, aux, taps):
    for name, t in list(taps.items()) + [("logits", logits)] + [
            (f"aux_{k}", v) for k, v in aux.items()]:
        if not np.all(np.isfinite(t.data)):
            return name
    return "loss"


def make_batch(dataset, indices, cfg, it, dtype=np.float32):
    samples = [augment(dataset[i], cfg, np.random.default_rng((cfg.seed, it, k)))
               for k, i in enumerate(indices)]
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.label for s in samples])
    return x, y


def train_loop(net, dataset, cfg, on_checkpoint=None, log=None):
    """Run ``cfg.max_iter`` SGD iterations; returns the per-iteration history.

    Each history entry holds ``iter``, ``lr``, ``loss`` and the per-head
    losses.  ``on_checkpoint(net, it)`` is called every
    ``cfg.checkpoint_every`` iterations when set.
    """
    if not net.initialized:
        net.initialize(cfg.seed)
    dtype = net.parameters()[0].data.dtype
    rng = np.random.default_rng(cfg.seed)
    history = []
    net.train()
    for it in range(cfg.max_iter):
        idx = rng.integers(0, len(dataset), cfg.batch)
        x, y = make_batch(dataset, idx, cfg, it, dtype)
        logits, aux, taps = net.forward_all(Tensor(x), with_aux=True)
        loss, parts = total_loss(logits, aux, y, cfg)
        if not math.isfinite(float(loss.data[0])):
            raise NumericError(f"non-finite loss at iteration {it}; first non-finite "
                               f"node: {_first_nonfinite(logits, aux, taps)}")
        lr = poly_lr(it, cfg)
        backward(loss)
        sgd_step(net.parameters(), lr, cfg)
        entry = {"iter": it, "lr": lr, "loss": float(loss.data[0])}
        entry.update({f"loss_{k}": v for k, v in parts.items()})
        history.append(entry)
        if log is not None:
            log(entry)
        if on_checkpoint and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(net, it + 1)
    return history


def pixel_accuracy(net, samples, ignore_index=255, batch=8):
    """Fraction of non-ignored pixels whose eval-mode argmax equals the label."""
    was_training = net.training
    net.eval()
    dtype = net.parameters()[0].data.dtype
    correct = total = 0
    try:
        with no_grad():
            for i in range(0, len(samples), batch):
                chunk = samples[i:i + batch]
                x = Tensor(np.stack([s.image for s in chunk]).astype(dtype))
                pred = np.argmax(net(x).data, axis=1)
                y = np.stack([s.label for s in chunk])
                valid = y != ignore_index
                correct += int((pred == y)[valid].sum())
                total += int(valid.sum())
    finally:
        net.train(was_training)
    return correct / max(total, 1)


def moving_average_windows(values, window=50):
    """Means of consecutive non-overlapping windows."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // window
    return values[:n * window].reshape(n, window).mean(axis=1)


def history_to_csv(history):
    keys = ["iter", "lr", "loss", "loss_main"]
    if history:
        keys += sorted(k for k in history[0] if k.startswith("loss_aux_"))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(keys)
    for h in history:
        wr.writerow([h["iter"]] + [repr(float(h[k])) for k in keys[1:]])
    return buf.getvalue()
