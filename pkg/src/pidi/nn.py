"""Layer modules built on the autograd tape.

Every module can also report its cost for a given input shape through
``cost(shape, report)``, which adds multiply-accumulates and parameter
counts to a :class:`pidi.analysis.CostReport` and returns the output shape.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import binary as B
from .pdc import ProbePattern, canonical_kind, default_padding, pdc_conv, probe_pattern, reparameterize
from .tensor import ConvSpec, DEFAULT_DTYPE, ShapeError


class UnsupportedLayerError(TypeError):
    pass


def _kaiming(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    training = True

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, ag.Var) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, x):
        if isinstance(x, np.ndarray):
            x = ag.constant(x)
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def cost(self, shape, report):
        raise UnsupportedLayerError(f"no cost rule for layer {type(self).__name__}")


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def cost(self, shape, report):
        for layer in self:
            shape = layer.cost(shape, report)
        return shape


class Identity(Module):
    def forward(self, x):
        return x

    def cost(self, shape, report):
        return shape


def _conv_shape(shape, out_ch, spec: ConvSpec):
    n, c, h, w = shape
    return (n, out_ch) + spec.output_size(h, w)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, dilation=1, groups=1, bias=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = ConvSpec(k, stride, padding, dilation, groups)
        self.in_channels, self.out_channels = cin, cout
        self.weight = ag.parameter(_kaiming(rng, (cout, cin // groups, k, k), cin // groups * k * k))
        self.bias = ag.parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.spec, self.bias)

    def cost(self, shape, report):
        out = _conv_shape(shape, self.out_channels, self.spec)
        k = self.spec.kernel_size
        report.flops += int(np.prod(out)) * (self.in_channels // self.spec.groups) * k * k
        report.fp_params += self.weight.data.size + (0 if self.bias is None else self.bias.data.size)
        return out


class PdcConv2d(Module):
    """Full-precision pixel difference convolution, trained via its kernel rewrite."""

    def __init__(self, cin, cout, kind, stride=1, padding=None, groups=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pattern: ProbePattern = probe_pattern(kind)
        pad = default_padding(self.pattern) if padding is None else padding
        self.spec = ConvSpec(self.pattern.window, stride, pad, 1, groups)
        self.in_channels, self.out_channels = cin, cout
        m = self.pattern.m
        self.weight = ag.parameter(_kaiming(rng, (cout, cin // groups, m), cin // groups * m))

    def forward(self, x):
        return pdc_conv(x, self.weight, self.pattern, self.spec)

    def reparameterized(self) -> Conv2d:
        """Plain convolution computing exactly the same function."""
        conv = Conv2d(self.in_channels, self.out_channels, self.pattern.window, self.spec.stride,
                      self.spec.padding, 1, self.spec.groups)
        conv.weight.data = reparameterize(self.weight.data, self.pattern)
        return conv

    def cost(self, shape, report):
        out = _conv_shape(shape, self.out_channels, self.spec)
        report.flops += int(np.prod(out)) * (self.in_channels // self.spec.groups) * self.spec.kernel_size ** 2
        report.fp_params += self.weight.data.size
        return out


class BConv2d(Module):
    """Binary convolution with latent full-precision weights."""

    def __init__(self, cin, cout, k=3, stride=1, padding=1, tau=0.0, ste_clip=1.0, scale_mode="none", rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = B.BinaryConvSpec(ConvSpec(k, stride, padding), tau, ste_clip, scale_mode)
        self.in_channels, self.out_channels = cin, cout
        self.weight = ag.parameter((rng.standard_normal((cout, cin, k, k)) * 0.05).astype(DEFAULT_DTYPE))

    def forward(self, x):
        return B.bconv_train(x, self.weight, self.spec)

    def packed_forward(self, x: np.ndarray) -> np.ndarray:
        return B.bconv(B.pack(x, self.spec.tau), B.pack(self.weight.data), self.spec, self._scale())

    def _scale(self):
        if self.spec.scale_mode == "none":
            return None
        return np.abs(self.weight.data).reshape(self.out_channels, -1).mean(axis=1)

    def cost(self, shape, report):
        out = _conv_shape(shape, self.out_channels, self.spec.conv)
        report.bops += int(np.prod(out)) * self.in_channels * self.spec.conv.kernel_size ** 2
        report.b_params += self.weight.data.size
        return out


class BiPdcConv2d(Module):
    """Binary pixel difference convolution (no kernel rewrite exists)."""

    def __init__(self, cin, cout, kind="C", stride=1, padding=None, ste_clip=1.0, scale_mode="none", rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pattern = probe_pattern(kind)
        pad = default_padding(self.pattern) if padding is None else padding
        self.spec = B.BinaryConvSpec(ConvSpec(self.pattern.window, stride, pad), 0.0, ste_clip, scale_mode)
        self.in_channels, self.out_channels = cin, cout
        self.weight = ag.parameter((rng.standard_normal((cout, cin, self.pattern.m)) * 0.05).astype(DEFAULT_DTYPE))

    def forward(self, x):
        return B.bipdc_train(x, self.weight, self.pattern, self.spec)

    def packed_forward(self, x: np.ndarray) -> np.ndarray:
        scale = None
        if self.spec.scale_mode != "none":
            scale = np.abs(self.weight.data).reshape(self.out_channels, -1).mean(axis=1)
        return B.bipdc_forward(x, B.pack(self.weight.data), self.pattern, self.spec, scale)

    def cost(self, shape, report):
        out = _conv_shape(shape, self.out_channels, self.spec.conv)
        sites = out[0] * out[2] * out[3]
        report.bops += int(np.prod(out)) * self.in_channels * self.pattern.m
        # each pair difference is one full-precision subtraction
        report.flops += sites * self.in_channels * self.pattern.m
        report.b_params += self.weight.data.size
        return out


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = ag.parameter(np.ones(c, DEFAULT_DTYPE))
        self.beta = ag.parameter(np.zeros(c, DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(c, DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(c, DEFAULT_DTYPE))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)

    def cost(self, shape, report):
        report.fp_params += 2 * shape[1]
        return shape


class ReLU(Module):
    def forward(self, x):
        return ag.relu(x)

    def cost(self, shape, report):
        return shape


class PReLU(Module):
    def __init__(self, c, init=0.25):
        super().__init__()
        self.slope = ag.parameter(np.full(c, init, DEFAULT_DTYPE))

    def forward(self, x):
        return ag.prelu(x, self.slope)

    def cost(self, shape, report):
        report.fp_params += self.slope.data.size
        return shape


class Sigmoid(Module):
    def forward(self, x):
        return ag.sigmoid(x)

    def cost(self, shape, report):
        return shape


class Pool2x2(Module):
    def __init__(self, mode="max"):
        super().__init__()
        self.mode = mode

    def forward(self, x):
        return ag.pool2x2(x, self.mode)

    def cost(self, shape, report):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"pool2x2 needs even spatial dims, got {h}x{w}")
        return (n, c, h // 2, w // 2)


def _segment_mean(x: ag.Var, n: int) -> ag.Var:
    """Mean over each run of ``n`` consecutive channels -> ``C / n`` channels."""
    b, c, h, w = x.shape
    groups = c // n
    out = x.data.reshape(b, groups, n, h, w).mean(axis=2)

    def fn(g):
        return (np.broadcast_to(g[:, :, None] / n, (b, groups, n, h, w)).reshape(x.shape).copy(),)

    return ag._make(out, (x,), fn)


def replica_pool_array(x: np.ndarray, m: int, n: int, out_channels: int | None = None) -> np.ndarray:
    """Parameter-free downsampling: avg-pool, ``m`` replicas, then the ``n``-segment channel mean."""
    return ReplicaPool(m, n, out_channels)(ag.constant(x)).data


class ReplicaPool(Module):
    """Average-pool by 2, stack ``m`` copies and append the mean of each run of ``n`` consecutive channels.

    Output has ``m*C + C/n`` channels, truncated to ``out_channels`` when given.
    """

    def __init__(self, m: int, n: int, out_channels: int | None = None):
        super().__init__()
        if m < 1 or n < 1:
            raise ValueError("ReplicaPool needs positive M and N")
        self.m, self.n, self.out_channels = m, n, out_channels

    def out_width(self, c: int) -> int:
        if c % self.n:
            raise ShapeError(f"ReplicaPool: channels {c} not divisible by N={self.n}")
        full = self.m * c + c // self.n
        if self.out_channels is None:
            return full
        if self.out_channels > full:
            raise ShapeError(f"ReplicaPool cannot produce {self.out_channels} channels from {c}")
        return self.out_channels

    def forward(self, x):
        c_out = self.out_width(x.shape[1])
        pooled = ag.pool2x2(x, "avg")
        y = ag.concat([pooled] * self.m + [_segment_mean(pooled, self.n)], axis=1)
        return ag.channels(y, 0, c_out)

    def cost(self, shape, report):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"ReplicaPool needs even spatial dims, got {h}x{w}")
        return (n, self.out_width(c), h // 2, w // 2)


def replica_factors(c_in: int, c_out: int) -> tuple[int, int]:
    """Choose ReplicaPool (M, N) for a ``c_in -> c_out`` reduction.

    Takes ``M = c_out // c_in`` replicas and the smallest segment mean that
    covers the remainder; an exact multiple uses ``M - 1`` replicas plus the
    ``N = 1`` mean.  Any overshoot is truncated by the layer.
    """
    if c_out < c_in:
        raise ValueError(f"ReplicaPool cannot shrink {c_in} -> {c_out} channels")
    m, rem = divmod(c_out, c_in)
    if rem == 0:
        return m - 1, 1
    divisors = [d for d in range(1, c_in + 1) if c_in % d == 0 and c_in // d >= rem]
    return m, max(divisors)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ag.global_avg_pool(x)

    def cost(self, shape, report):
        return shape[:2]


class Linear(Module):
    def __init__(self, fin, fout, bias=True, classifier=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = ag.parameter(rng.uniform(-bound, bound, (fout, fin)).astype(DEFAULT_DTYPE))
        self.bias = ag.parameter(np.zeros(fout, DEFAULT_DTYPE)) if bias else None
        self.classifier = classifier

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)

    def cost(self, shape, report):
        out = (shape[0], self.weight.data.shape[0])
        if not self.classifier:
            report.flops += shape[0] * self.weight.data.size
            report.fp_params += self.weight.data.size + (0 if self.bias is None else self.bias.data.size)
        return out


class HybridConv2d(Module):
    """Channel-split binary layer: Bi-PDC on the first ``round(xi*C)`` channels, BConv on the rest.

    Each branch is followed by its own BatchNorm + PReLU and the branch
    outputs are summed.  With ``xi = 0`` only the BConv branch exists.
    """

    def __init__(self, cin, cout, xi=0.2, kind="C", stride=1, tau=0.0, ste_clip=1.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.split = B.split_index(xi, cin)
        self.in_channels, self.out_channels = cin, cout
        self.bipdc = self.bconv = None
        if self.split > 0:
            kind = canonical_kind(kind)
            self.bipdc = Sequential(BiPdcConv2d(self.split, cout, kind, stride, ste_clip=ste_clip, rng=rng),
                                    BatchNorm2d(cout), PReLU(cout))
        if self.split < cin:
            self.bconv = Sequential(BConv2d(cin - self.split, cout, 3, stride, 1, tau, ste_clip, rng=rng),
                                    BatchNorm2d(cout), PReLU(cout))

    def forward(self, x):
        outs = []
        if self.bipdc is not None:
            outs.append(self.bipdc(ag.channels(x, 0, self.split)))
        if self.bconv is not None:
            outs.append(self.bconv(ag.channels(x, self.split, self.in_channels)))
        return ag.total(outs)

    def cost(self, shape, report):
        n, c, h, w = shape
        out = None
        if self.bipdc is not None:
            out = self.bipdc.cost((n, self.split, h, w), report)
        if self.bconv is not None:
            out = self.bconv.cost((n, c - self.split, h, w), report)
        return out
