"""Minimal module system: parameter registry, train/eval mode, layers."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Parameter, scope


class Module:
    """Base class for layers and blocks.

    Child modules and parameters are discovered from instance attributes in
    assignment order, which fixes the registry order used for initialization
    and checkpoints.
    """

    def __init__(self):
        self.training = True
        self._scope = ""

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            value._scope = name
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        with scope(self._scope):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module) and not name.startswith("_"):
                yield name, value

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    value.name = f"{mod_name}.{name}" if mod_name else name
                    yield value.name, value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """(name, owner, attribute) for every non-learnable state array."""
        for mod_name, mod in self.named_modules(prefix):
            for attr in getattr(mod, "buffer_names", ()):
                yield f"{mod_name}.{attr}" if mod_name else attr, mod, attr

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def initialize(self, seed=0, dtype=np.float32):
        """Kaiming-normal kernels, zero biases, unit BN scale, zero BN shift."""
        rng = np.random.default_rng(seed)
        for _, p in self.named_parameters():
            if p.init == "kaiming":
                fan_in = int(np.prod(p.shape[1:]))
                p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            elif p.init == "ones":
                p.data = np.ones(p.shape, dtype=dtype)
            else:
                p.data = np.zeros(p.shape, dtype=dtype)
            p.grad = None
            p.velocity = None
        for _, mod, attr in self.named_buffers():
            mod.reset_buffer(attr)
        return self

    def astype(self, dtype):
        for p in self.parameters():
            if p.data is not None:
                p.data = p.data.astype(dtype)
            p.grad = None
            p.velocity = None
        return self

    @property
    def initialized(self):
        return all(p.initialized for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        name = str(len(self._items))
        module._scope = name
        object.__setattr__(self, name, module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self._items:
            x = m(x)
        return x


class Conv2d(Module):
    """k x k convolution with "same" padding ``k // 2``."""

    def __init__(self, c_in, c_out, k=3, stride=1, groups=1, bias=False):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise ConfigError(f"conv channels must be positive, got {c_in}->{c_out}")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.groups, self.pad = stride, groups, k // 2
        self.weight = Parameter((c_out, c_in // groups, k, k))
        self.bias = Parameter((c_out,), decay_exempt=True, init="zeros") if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    """Batch norm; running statistics are kept in float64 whatever the parameter dtype."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gamma = Parameter((c,), decay_exempt=True, init="ones")
        self.beta = Parameter((c,), decay_exempt=True, init="zeros")
        self.running_mean = None
        self.running_var = None

    def reset_buffer(self, attr):
        fill = np.zeros if attr == "running_mean" else np.ones
        setattr(self, attr, fill(self.c, dtype=np.float64))

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, self.training, self.momentum, self.eps)


class ConvBN(Module):
    """Conv -> BN, optionally followed by ReLU."""

    def __init__(self, c_in, c_out, k=3, stride=1, groups=1, relu=True):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride, groups)
        self.bn = BatchNorm2d(c_out)
        self.relu = relu

    def forward(self, x):
        x = self.bn(self.conv(x))
        return ops.relu(x) if self.relu else x


def depthwise(c, k=3, stride=1, relu=False):
    return ConvBN(c, c, k, stride, groups=c, relu=relu)


class ModuleDict(Module):
    """String-keyed modules, iterated in insertion order."""

    def __init__(self):
        super().__init__()
        self._items = {}

    def __setitem__(self, key, module):
        if key in self._items:
            raise KeyError(f"duplicate module key {key!r}")
        module._scope = key
        object.__setattr__(self, key, module)
        self._items[key] = module

    def __getitem__(self, key):
        return self._items[key]

    def __contains__(self, key):
        return key in self._items

    def __len__(self):
        return len(self._items)

    def keys(self):
        return list(self._items)

    def items(self):
        return list(self._items.items())
