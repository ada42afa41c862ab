"""Layer zoo on top of the autograd tape.

Weights are drawn from a zero-mean uniform scaled by fan-in; biases start at
zero. Every constructor takes the `numpy.random.Generator` that feeds its
init, so a model built twice from the same seed is bit-identical.
"""

import numpy as np

from . import autograd as ag
from .autograd import Parameter


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class providing parameter traversal in attribute order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            name = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state dict mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"checkpoint {value.shape} vs model {p.data.shape}")
            p.data = value.astype(p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def append(self, module):
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]

    def named_parameters(self, prefix=""):
        for i, module in enumerate(self._items):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from module.named_parameters(name)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = Parameter(fan_in_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    """Same-padding convolution over NHWC maps (odd kernel sizes)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, bias=True):
        fan_in = kernel_size * kernel_size * in_channels
        self.kernel = Parameter(
            fan_in_uniform(rng, (kernel_size, kernel_size, in_channels, out_channels), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride

    def forward(self, x):
        y = ag.conv2d(x, self.kernel, stride=self.stride)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class FeedForward(Module):
    """Position-wise two-layer MLP with GELU between."""

    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class ConvBlock(Module):
    """3x3 conv -> channel norm -> GELU -> 1x1 projection, on NHWC maps."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv2d(in_channels, in_channels, 3, rng)
        self.norm = LayerNorm(in_channels)
        self.proj = Conv2d(in_channels, out_channels, 1, rng)

    def forward(self, x):
        return self.proj(ag.gelu(self.norm(self.conv(x))))
