"""Pixel difference convolution.

A probe pattern is an ordered list of ``(sampled, reference)`` offset pairs
inside a ``k x k`` window.  The layer output at each location is
``sum_i w_i * (x[sampled_i] - x[reference_i])``.  Because the expression is
linear in ``x`` it can be rewritten as an ordinary convolution whose kernel
holds the signed sum of pair weights at each offset (:func:`reparameterize`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .tensor import ConvSpec, ShapeError, check_rank4, conv2d, conv2d_backward, pad2d, window

KINDS = ("C", "A", "R")
_NAMES = {"C": "CPDC", "A": "APDC", "R": "RPDC", "CPDC": "C", "APDC": "A", "RPDC": "R"}

# 3x3 ring, starting top-left and moving along the top row first.
RING = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))

Offset = tuple[int, int]


@dataclass(frozen=True)
class ProbePattern:
    kind: str
    pairs: tuple[tuple[Offset, Offset], ...]
    window: int

    def __post_init__(self):
        if len(self.pairs) > self.window ** 2:
            raise ValueError("more pairs than window cells")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate pairs in probe pattern")
        r = self.window // 2
        for pair in self.pairs:
            for dy, dx in pair:
                if abs(dy) > r or abs(dx) > r:
                    raise ValueError(f"offset {(dy, dx)} outside {self.window}x{self.window} window")

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def name(self) -> str:
        return _NAMES[self.kind]


def canonical_kind(kind: str) -> str:
    k = kind.upper()
    if k in KINDS:
        return k
    if k in _NAMES:
        return _NAMES[k]
    raise ValueError(f"unknown PDC kind {kind!r}")


def probe_pattern(kind: str) -> ProbePattern:
    """Pixel pairs for central, angular or radial difference probing."""
    kind = canonical_kind(kind)
    if kind == "C":
        pairs = tuple((o, (0, 0)) for o in RING)
        return ProbePattern("C", pairs, 3)
    if kind == "A":
        pairs = tuple((RING[i], RING[(i + 1) % 8]) for i in range(8))
        return ProbePattern("A", pairs, 3)
    pairs = tuple(((2 * dy, 2 * dx), (dy, dx)) for dy, dx in RING)
    return ProbePattern("R", pairs, 5)


def default_padding(pattern: ProbePattern) -> int:
    return pattern.window // 2


def reparameterize(w: np.ndarray, pattern: ProbePattern) -> np.ndarray:
    """Pair weights ``(O, Cg, m)`` -> equivalent kernel ``(O, Cg, k, k)``.

    Each pair adds ``+w`` at its sampled cell and ``-w`` at its reference cell.
    """
    if w.shape[-1] != pattern.m:
        raise ShapeError(f"weights have {w.shape[-1]} pair entries, pattern has {pattern.m}")
    k, r = pattern.window, pattern.window // 2
    khat = np.zeros(w.shape[:-1] + (k, k), dtype=w.dtype)
    for i, ((sy, sx), (ry, rx)) in enumerate(pattern.pairs):
        khat[..., sy + r, sx + r] += w[..., i]
        khat[..., ry + r, rx + r] -= w[..., i]
    return khat


def reparameterize_backward(grad_khat: np.ndarray, pattern: ProbePattern) -> np.ndarray:
    r = pattern.window // 2
    cols = [grad_khat[..., sy + r, sx + r] - grad_khat[..., ry + r, rx + r]
            for (sy, sx), (ry, rx) in pattern.pairs]
    return np.stack(cols, axis=-1)


def _check(x: np.ndarray, w: np.ndarray, pattern: ProbePattern, spec: ConvSpec):
    check_rank4(x)
    if spec.kernel_size != pattern.window:
        raise ShapeError(f"ConvSpec kernel {spec.kernel_size} does not match {pattern.name} window {pattern.window}")
    if w.ndim != 3 or w.shape[-1] != pattern.m:
        raise ShapeError(f"PDC weights must be (out, in/groups, {pattern.m}), got {w.shape}")
    n, c, h, wd = x.shape
    if c % spec.groups or w.shape[0] % spec.groups:
        raise ShapeError(f"channels not divisible by groups {spec.groups}")
    if w.shape[1] != c // spec.groups:
        raise ShapeError(f"weight in-channels {w.shape[1]} != input channels {c} / groups {spec.groups}")
    return spec.output_size(h, wd)


def pair_differences(x: np.ndarray, pattern: ProbePattern, spec: ConvSpec) -> np.ndarray:
    """``(N, C, m, Ho, Wo)`` array of ``x[sampled] - x[reference]`` at each output site."""
    ho, wo = spec.output_size(*x.shape[2:])
    xp = pad2d(x, spec.padding)
    r, d, s = pattern.window // 2, spec.dilation, spec.stride
    diffs = np.empty(x.shape[:2] + (pattern.m, ho, wo), dtype=x.dtype)
    for i, ((sy, sx), (ry, rx)) in enumerate(pattern.pairs):
        a = window(xp, (sy + r) * d, (sx + r) * d, s, ho, wo)
        b = window(xp, (ry + r) * d, (rx + r) * d, s, ho, wo)
        np.subtract(a, b, out=diffs[:, :, i])
    return diffs


def pair_differences_backward(grad_diffs: np.ndarray, x_shape: tuple, pattern: ProbePattern,
                              spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x_shape
    p, r, d, s = spec.padding, pattern.window // 2, spec.dilation, spec.stride
    ho, wo = grad_diffs.shape[-2:]
    gp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_diffs.dtype)
    for i, ((sy, sx), (ry, rx)) in enumerate(pattern.pairs):
        window(gp, (sy + r) * d, (sx + r) * d, s, ho, wo)[...] += grad_diffs[:, :, i]
        window(gp, (ry + r) * d, (rx + r) * d, s, ho, wo)[...] -= grad_diffs[:, :, i]
    return gp[:, :, p: p + h, p: p + w]


def _contract(diffs: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    n, c, m, ho, wo = diffs.shape
    o = w.shape[0]
    flat = diffs.reshape(n, groups, (c // groups) * m, ho * wo)
    out = np.matmul(w.reshape(groups, o // groups, -1), flat)
    return out.reshape(n, o, ho, wo)


def pdc_forward_pairs(x: np.ndarray, w: np.ndarray, pattern: ProbePattern, spec: ConvSpec) -> np.ndarray:
    """Reference semantics: explicit pixel differences, then weighted sum."""
    _check(x, w, pattern, spec)
    return _contract(pair_differences(x, pattern, spec), w, spec.groups)


def pdc_backward_pairs(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, pattern: ProbePattern,
                       spec: ConvSpec):
    ho, wo = _check(x, w, pattern, spec)
    n, c = x.shape[:2]
    o, g = w.shape[0], spec.groups
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, o, ho, wo)}")
    diffs = pair_differences(x, pattern, spec)
    flat = diffs.reshape(n, g, (c // g) * pattern.m, ho * wo)
    gflat = grad_out.reshape(n, g, o // g, ho * wo)
    grad_w = np.matmul(gflat, flat.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    gdiffs = np.matmul(w.reshape(g, o // g, -1).transpose(0, 2, 1), gflat)
    grad_x = pair_differences_backward(gdiffs.reshape(diffs.shape), x.shape, pattern, spec)
    return grad_x, grad_w


def pdc_forward_reparam(x: np.ndarray, khat: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Fast semantics: a plain convolution with the re-parameterized kernel."""
    return conv2d(x, khat, spec)


def pdc_conv(x: ag.Var, w: ag.Var, pattern: ProbePattern, spec: ConvSpec) -> ag.Var:
    """Differentiable PDC evaluated through the re-parameterized kernel."""
    _check(x.data, w.data, pattern, spec)
    khat = reparameterize(w.data, pattern)
    out = conv2d(x.data, khat, spec)

    def fn(g):
        gx, gk = conv2d_backward(g, x.data, khat, spec)
        return gx, reparameterize_backward(gk, pattern)

    return ag._make(out, (x, w), fn)
