"""Trainable layers: hypercomplex (Kronecker-sum) and real-valued.

A PHM layer mixes channels with a weight built as a learnable sum of n
Kronecker products; a PHC layer is its convolutional analogue. With
n=1 both collapse exactly to the ordinary dense/convolutional layer,
which is how the real-valued baselines are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, ShapeError

DEFAULT_DTYPE = np.float32


@dataclass
class Context:
    """Per-forward-pass state: train/eval mode and the dropout RNG."""

    training: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


EVAL = Context(training=False)


class Module:
    """Minimal container with named parameters, buffers and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Variable):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.value.size for _, p in self.named_parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (used for f64 verification)."""
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype)
            p.grad = None
        for holder in self._iter_modules():
            for name, b in holder._buffers.items():
                holder.register_buffer(name, b.astype(dtype))
        return self

    def _iter_modules(self):
        yield self
        for m in self._modules.values():
            yield from m._iter_modules()

    def init_params(self, rng: np.random.Generator):
        """Layer-specific initialisation; containers have nothing to do."""

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def __call__(self, x, ctx: Context = EVAL):
        return self.forward(x, ctx)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def init_he(module: Module, rng: np.random.Generator):
    """He-normal initialisation of every layer in registration order."""
    for m in module._iter_modules():
        m.init_params(rng)


def _param(shape, dtype=DEFAULT_DTYPE):
    return Variable(np.zeros(shape, dtype=dtype), requires_grad=True)


def _add_channel_bias(y: Variable, bias: Variable | None) -> Variable:
    if bias is None:
        return y
    if y.value.ndim == 1:
        return ad.add(y, bias)
    return ad.add(y, ad.reshape(bias, (bias.value.shape[0], 1)))


class Linear(Module):
    """Dense channel mixer y = W x + b applied over the channel axis."""

    def __init__(self, d_in, d_out, bias=True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = _param((d_out, d_in), dtype)
        if bias:
            self.bias = _param((d_out,), dtype)
        else:
            self.bias = None

    def init_params(self, rng):
        std = np.sqrt(2.0 / self.d_in)
        self.weight.value[...] = rng.normal(0.0, std, self.weight.value.shape)
        if self.bias is not None:
            self.bias.value[...] = 0.0

    def forward(self, x, ctx=EVAL):
        return _add_channel_bias(ad.matmul(self.weight, x), self.bias)


class PHM(Module):
    """Hypercomplex channel mixer: weight = sum of n Kronecker products.

    ``algebra`` holds the n learnable n-by-n mixing matrices and
    ``blocks`` the n (d_out/n, d_in/n) weight blocks; the dense weight
    is rebuilt from them on every forward pass.
    """

    def __init__(self, n, d_in, d_out, bias=True, dtype=DEFAULT_DTYPE):
        super().__init__()
        if d_in % n or d_out % n:
            raise ConfigError(f"PHM: d_in={d_in}, d_out={d_out} must be divisible by n={n}")
        self.n, self.d_in, self.d_out = n, d_in, d_out
        self.algebra = _param((n, n, n), dtype)
        self.blocks = _param((n, d_out // n, d_in // n), dtype)
        self.bias = _param((d_out,), dtype) if bias else None

    def init_params(self, rng):
        self.algebra.value[...] = rng.uniform(-1.0, 1.0, self.algebra.value.shape)
        std = np.sqrt(2.0 / self.d_in)
        self.blocks.value[...] = rng.normal(0.0, std, self.blocks.value.shape)
        if self.bias is not None:
            self.bias.value[...] = 0.0

    def build_weight(self) -> Variable:
        return ad.kron_sum(self.algebra, self.blocks)

    def forward(self, x, ctx=EVAL):
        if (x.value.shape[0] if x.value.ndim <= 2 else x.value.shape[1]) != self.d_in:
            raise ShapeError(f"PHM: expected {self.d_in} channels, got {x.value.shape}")
        return _add_channel_bias(ad.matmul(self.build_weight(), x), self.bias)


class Conv1d(Module):
    """Real-valued 1D convolution (cross-correlation)."""

    def __init__(
        self, d_in, d_out, kernel, stride=1, dilation=1, padding=0, groups=1,
        bias=True, dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if d_in % groups or d_out % groups:
            raise ConfigError(f"Conv1d: channels {d_in}->{d_out} not divisible by groups={groups}")
        self.d_in, self.d_out, self.kernel = d_in, d_out, kernel
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups
        self.weight = _param((d_out, d_in // groups, kernel), dtype)
        self.bias = _param((d_out,), dtype) if bias else None

    def init_params(self, rng):
        fan_in = (self.d_in // self.groups) * self.kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight.value[...] = rng.normal(0.0, std, self.weight.value.shape)
        if self.bias is not None:
            self.bias.value[...] = 0.0

    def forward(self, x, ctx=EVAL):
        squeeze = x.value.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1, *x.value.shape))
        y = ad.conv1d(
            x, self.weight, self.bias,
            stride=self.stride, dilation=self.dilation,
            padding=self.padding, groups=self.groups,
        )
        if squeeze:
            y = ad.reshape(y, y.value.shape[1:])
        return y


class PHC(Module):
    """Hypercomplex 1D convolution: filter bank built as a Kronecker sum."""

    def __init__(
        self, n, d_in, d_out, kernel, stride=1, dilation=1, padding=0,
        bias=True, dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if d_in % n or d_out % n:
            raise ConfigError(f"PHC: d_in={d_in}, d_out={d_out} must be divisible by n={n}")
        self.n, self.d_in, self.d_out, self.kernel = n, d_in, d_out, kernel
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.algebra = _param((n, n, n), dtype)
        self.blocks = _param((n, d_out // n, d_in // n, kernel), dtype)
        self.bias = _param((d_out,), dtype) if bias else None

    def init_params(self, rng):
        self.algebra.value[...] = rng.uniform(-1.0, 1.0, self.algebra.value.shape)
        std = np.sqrt(2.0 / (self.d_in * self.kernel))
        self.blocks.value[...] = rng.normal(0.0, std, self.blocks.value.shape)
        if self.bias is not None:
            self.bias.value[...] = 0.0

    def build_weight(self) -> Variable:
        return ad.kron_sum(self.algebra, self.blocks)

    def forward(self, x, ctx=EVAL):
        squeeze = x.value.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1, *x.value.shape))
        if x.value.shape[1] != self.d_in:
            raise ShapeError(f"PHC: expected {self.d_in} channels, got {x.value.shape}")
        y = ad.conv1d(
            x, self.build_weight(), self.bias,
            stride=self.stride, dilation=self.dilation, padding=self.padding,
        )
        if squeeze:
            y = ad.reshape(y, y.value.shape[1:])
        return y


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = _param((channels,), dtype)
        self.beta = _param((channels,), dtype)
        self.gamma.value[...] = 1.0
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def init_params(self, rng):
        self.gamma.value[...] = 1.0
        self.beta.value[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x, ctx=EVAL):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=ctx.training, momentum=self.momentum, eps=self.eps,
        )


class Dropout(Module):
    def __init__(self, p=0.2):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"Dropout: p={p} outside [0, 1)")
        self.p = p

    def forward(self, x, ctx=EVAL):
        return ad.dropout(x, self.p, ctx.training, ctx.rng)


class SEBlock(Module):
    """Squeeze-and-excitation channel gate with reduction ratio 8.

    The two channel mixers are PHM layers when ``n > 1`` (demanding all
    widths divisible by n) and plain dense layers otherwise.
    """

    def __init__(self, channels, n=1, reduction=8, dtype=DEFAULT_DTYPE):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ConfigError(f"SEBlock: {channels} channels too few for reduction {reduction}")
        if n > 1 and (channels % n or hidden % n):
            raise ConfigError(
                f"SEBlock: widths {channels}->{hidden} not divisible by n={n}"
            )
        self.channels, self.hidden, self.n = channels, hidden, n
        if n > 1:
            self.reduce = PHM(n, channels, hidden, dtype=dtype)
            self.expand = PHM(n, hidden, channels, dtype=dtype)
        else:
            self.reduce = Linear(channels, hidden, dtype=dtype)
            self.expand = Linear(hidden, channels, dtype=dtype)

    def forward(self, x, ctx=EVAL):
        # squeeze (b,d,t) -> (b,d); mixers act on channels, so flip to (d,b)
        squeezed = ad.transpose_last2(ad.global_avgpool(x))
        gate = ad.sigmoid(self.expand(ad.relu(self.reduce(squeezed)), ctx))
        gate = ad.transpose_last2(gate)  # (b,d)
        gate = ad.reshape(gate, (*gate.value.shape, 1))
        return ad.mul(x, gate)


def reduction_ratio(ph: Module | int, real: Module | int) -> float:
    """Trainable-parameter ratio of a hypercomplex layer/model vs its baseline."""
    ph_n = ph if isinstance(ph, int) else ph.param_count()
    real_n = real if isinstance(real, int) else real.param_count()
    return ph_n / real_n
