"""Small module system over the tensor library: convs, norms, blocks, GRU.

Modules register parameters and children in declaration order; weight init
draws from the generator handed to the constructor, so a fixed seed yields
bitwise identical models.
"""

from __future__ import annotations

import numpy as np

from bevcast import tensor as T
from bevcast.tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, ModuleList):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel=3, stride=1, padding=None, bias=True,
                 zero_init=False):
        super().__init__()
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        w = np.zeros((cout, cin, kernel, kernel)) if zero_init else \
            kaiming(rng, (cout, cin, kernel, kernel), fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, rng, cin, cout, kernel=(1, 1, 1), stride=1, padding=0, bias=True,
                 zero_init=False):
        super().__init__()
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.stride = stride
        self.padding = padding
        fan_in = cin * int(np.prod(kernel))
        w = np.zeros((cout, cin) + kernel) if zero_init else \
            kaiming(rng, (cout, cin) + kernel, fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ChannelNorm(Module):
    """Per-channel normalization over spatial (and temporal) dims."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.channel_norm(x, self.gamma, self.beta, self.eps)


class ConvNormRelu(Module):
    def __init__(self, rng, cin, cout, kernel=3, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel, stride)
        self.norm = ChannelNorm(cout)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class ResidualBlock2d(Module):
    """Two 3x3 convs with a norm each; projection shortcut when shape changes."""

    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride)
        self.norm1 = ChannelNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1)
        self.norm2 = ChannelNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(rng, cin, cout, 1, stride, padding=0)
        else:
            self.proj = None

    def forward(self, x):
        h = T.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(h + skip)


class ConvGRUCell(Module):
    """Convolutional GRU: gates from [h, x], candidate from [r*h, x]."""

    def __init__(self, rng, hidden_channels, input_channels, kernel=3):
        super().__init__()
        self.gates = Conv2d(rng, hidden_channels + input_channels, 2 * hidden_channels, kernel)
        self.candidate = Conv2d(rng, hidden_channels + input_channels, hidden_channels, kernel)
        self.hidden_channels = hidden_channels

    def forward(self, h, x):
        hc = self.hidden_channels
        zr = T.sigmoid(self.gates(T.concat([h, x], axis=1)))
        z = zr[:, :hc]
        r = zr[:, hc:]
        h_tilde = T.tanh(self.candidate(T.concat([r * h, x], axis=1)))
        return (1.0 - z) * h + z * h_tilde


class UpsampleConcatConv(Module):
    """Bilinear 2x upsample, concat a skip, fuse with a conv."""

    def __init__(self, rng, cin, c_skip, cout, kernel=3):
        super().__init__()
        self.conv = Conv2d(rng, cin + c_skip, cout, kernel)
        self.norm = ChannelNorm(cout)

    def forward(self, x, skip):
        up = T.upsample_bilinear2x(x)
        if up.shape[2] != skip.shape[2] or up.shape[3] != skip.shape[3]:
            up = up[:, :, :skip.shape[2], :skip.shape[3]]
        return T.relu(self.norm(self.conv(T.concat([up, skip], axis=1))))
