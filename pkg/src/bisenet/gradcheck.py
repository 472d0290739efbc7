"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .ops import weighted_sum
from .tensor import Tensor, backward


def grad_check(fn, inputs, eps=1e-6, seed=0, max_coords=None):
    """Largest relative error between analytic and numeric gradients.

    ``fn`` maps the list ``inputs`` (float64 tensors, parameters included) to
    one output tensor.  The output is scalarized with a fixed random
    projection; the error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_coords`` caps the
    number of coordinates probed per input (sampled without replacement).
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    proj = rng.standard_normal(out.shape)
    backward(weighted_sum(out, proj))
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def objective():
        return float((fn(inputs).data * proj).sum())

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        gaf = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective()
            flat[i] = orig - eps
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(gaf[i] - num) / max(1.0, abs(num)))
    for t in inputs:
        t.grad = None
    return worst


def as_inputs(*arrays):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
