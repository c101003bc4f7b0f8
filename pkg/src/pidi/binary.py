"""Binary convolutions: sign/STE, bit packing and XNOR-popcount kernels.

Bit value 1 stands for +1 and 0 for -1.  ``Sign(0) = +1`` everywhere.

Two binary layers are provided:

* BConv thresholds every activation against one scalar ``tau``.
* Bi-PDC binarizes pixel differences ``x[sampled] - x[reference]``, so the
  threshold of each bit is a neighbouring pixel.  The sign sits between the
  difference and the weight, so unlike full-precision PDC there is no
  equivalent plain-convolution kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .pdc import ProbePattern, pair_differences, pair_differences_backward
from .tensor import ConvSpec, ShapeError, check_rank4, conv2d, conv2d_backward, im2col

WORD = 64


def words_per_row(nbits: int) -> int:
    return max(1, -(-nbits // WORD))


@dataclass(frozen=True)
class BinaryConvSpec:
    conv: ConvSpec
    tau: float = 0.0
    ste_clip: float = 1.0
    scale_mode: str = "none"

    def __post_init__(self):
        if self.ste_clip <= 0:
            raise ValueError("ste_clip must be positive")
        if self.scale_mode not in ("none", "per_channel_mean_abs"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def pad_bit(self) -> int:
        """Bit contributed by a zero-padded border cell: Sign(0 - tau)."""
        return 1 if -self.tau >= 0 else 0


class BitTensor:
    """Row-packed {-1,+1} tensor: one row per leading index, 64 bits per word."""

    __slots__ = ("shape", "words")

    def __init__(self, shape, words: np.ndarray):
        self.shape = tuple(int(s) for s in shape)
        self.words = np.ascontiguousarray(words, dtype=np.uint64)
        if self.words.shape != (self.shape[0], words_per_row(self.row_bits)):
            raise ShapeError(f"word array {self.words.shape} does not fit logical shape {self.shape}")

    @property
    def row_bits(self) -> int:
        return int(np.prod(self.shape[1:], dtype=np.int64))

    def __eq__(self, other):
        return isinstance(other, BitTensor) and self.shape == other.shape and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"BitTensor(shape={self.shape})"

    def bits(self) -> np.ndarray:
        """0/1 array with the logical shape."""
        return unpack_rows(self.words, self.row_bits).reshape(self.shape)

    def unpack(self, dtype=np.float32) -> np.ndarray:
        return (2 * self.bits().astype(dtype) - 1).astype(dtype)


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a ``(rows, nbits)`` 0/1 array into ``(rows, words)`` uint64; tail bits zero."""
    rows, nbits = bits.shape
    nw = words_per_row(nbits)
    padded = np.zeros((rows, nw * WORD), dtype=np.uint8)
    padded[:, :nbits] = bits
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def unpack_rows(words: np.ndarray, nbits: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, axis=1, bitorder="little")[:, :nbits]


def pack(x: np.ndarray, tau: float = 0.0) -> BitTensor:
    """Binarize ``x - tau`` with Sign and pack along all but the leading axis."""
    x = np.asarray(x)
    bits = (x - tau >= 0).astype(np.uint8)
    return BitTensor(x.shape, pack_rows(bits.reshape(x.shape[0], -1)))


def sign(x: np.ndarray, tau: float = 0.0) -> np.ndarray:
    x = np.asarray(x)
    dt = x.dtype if x.dtype.kind == "f" else np.float32
    return np.where(x - tau >= 0, 1, -1).astype(dt)


def ste_backward(grad_out: np.ndarray, pre_activation: np.ndarray, clip: float = 1.0) -> np.ndarray:
    """Straight-through estimator: pass gradients where ``|pre| <= clip``."""
    if grad_out.shape != np.shape(pre_activation):
        raise ShapeError(f"grad shape {grad_out.shape} != pre-activation shape {np.shape(pre_activation)}")
    return grad_out * (np.abs(pre_activation) <= clip)


def xnor_popcount_dot(a_words: np.ndarray, b_words: np.ndarray, nbits: int,
                      chunk_elems: int = 1 << 22) -> np.ndarray:
    """``(R, W) x (O, W) -> (R, O)`` matrix of +-1 dot products ``2*popcount(XNOR) - n``."""
    nw = a_words.shape[1]
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = nbits - WORD * (nw - 1)
    if tail < WORD:
        mask[-1] = np.uint64((1 << tail) - 1)
    rows = a_words.shape[0]
    out = np.empty((rows, b_words.shape[0]), dtype=np.int64)
    step = max(1, chunk_elems // max(1, b_words.shape[0] * nw))
    for r0 in range(0, rows, step):
        a = a_words[r0: r0 + step, None, :]
        xnor = ~(a ^ b_words[None, :, :]) & mask
        out[r0: r0 + step] = np.bitwise_count(xnor).sum(axis=-1, dtype=np.int64)
    return 2 * out - nbits


def _pad_bits(bits: np.ndarray, p: int, value: int) -> np.ndarray:
    if p == 0:
        return bits
    return np.pad(bits, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def bconv(xb: BitTensor, wb: BitTensor, spec: BinaryConvSpec, scale: np.ndarray | None = None) -> np.ndarray:
    """Packed binary convolution of pre-binarized activations with binary weights.

    Border cells take the value ``Sign(0 - tau)``.  Returns integer-valued
    float32 outputs (optionally scaled per output channel).
    """
    cs = spec.conv
    if len(xb.shape) != 4 or len(wb.shape) != 4:
        raise ShapeError("bconv expects NCHW activations and (O, C, k, k) weights")
    if cs.groups != 1:
        raise ShapeError("packed bconv supports groups=1 only")
    n, c, h, w = xb.shape
    o, cw, k, k2 = wb.shape
    if cw != c or k != cs.kernel_size or k2 != k:
        raise ShapeError(f"weight shape {wb.shape} incompatible with input {xb.shape} and kernel {cs.kernel_size}")
    ho, wo = cs.output_size(h, w)
    bits = _pad_bits(xb.bits(), cs.padding, spec.pad_bit)
    cols = im2col(bits, ConvSpec(k, cs.stride, 0, cs.dilation))  # (N, C, kk, Ho, Wo)
    rows = cols.reshape(n, c * k * k, ho * wo).transpose(0, 2, 1).reshape(-1, c * k * k)
    dots = xnor_popcount_dot(pack_rows(rows), wb.words, c * k * k)
    out = dots.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).astype(np.float32)
    if scale is not None:
        out *= np.asarray(scale, dtype=np.float32).reshape(1, -1, 1, 1)
    return out


def bconv_reference(x: np.ndarray, w: np.ndarray, spec: BinaryConvSpec) -> np.ndarray:
    """Float +-1 oracle for :func:`bconv` on real-valued ``x`` and latent ``w``."""
    cs = spec.conv
    p = cs.padding
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    xs = sign(xp, spec.tau)
    return conv2d(xs, sign(np.asarray(w, dtype=np.float64)),
                  ConvSpec(cs.kernel_size, cs.stride, 0, cs.dilation, cs.groups))


def _check_bipdc(x: np.ndarray, wshape: tuple, pattern: ProbePattern, spec: BinaryConvSpec):
    check_rank4(x)
    cs = spec.conv
    if cs.kernel_size != pattern.window:
        raise ShapeError(f"kernel size {cs.kernel_size} does not match {pattern.name} window {pattern.window}")
    if len(wshape) != 3 or wshape[1] != x.shape[1] or wshape[2] != pattern.m:
        raise ShapeError(f"Bi-PDC weights must be (O, {x.shape[1]}, {pattern.m}), got {wshape}")
    if cs.groups != 1:
        raise ShapeError("Bi-PDC supports groups=1 only")


def bipdc_forward(x: np.ndarray, wb: BitTensor, pattern: ProbePattern, spec: BinaryConvSpec,
                  scale: np.ndarray | None = None) -> np.ndarray:
    """Packed Bi-PDC: binarize each pixel difference, then XNOR-popcount with ``wb``."""
    _check_bipdc(x, wb.shape, pattern, spec)
    diffs = pair_differences(x, pattern, spec.conv)  # (N, C, m, Ho, Wo)
    n, c, m, ho, wo = diffs.shape
    rows = (diffs >= 0).astype(np.uint8).reshape(n, c * m, ho * wo).transpose(0, 2, 1).reshape(-1, c * m)
    dots = xnor_popcount_dot(pack_rows(rows), wb.words, c * m)
    out = dots.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2).astype(np.float32)
    if scale is not None:
        out *= np.asarray(scale, dtype=np.float32).reshape(1, -1, 1, 1)
    return out


def bipdc_reference(x: np.ndarray, w: np.ndarray, pattern: ProbePattern, spec: BinaryConvSpec) -> np.ndarray:
    """Float oracle: ``sum_i sign(w_i) * sign(x_i - x_i')``."""
    _check_bipdc(x, w.shape, pattern, spec)
    diffs = pair_differences(np.asarray(x, dtype=np.float64), pattern, spec.conv)
    n, c, m, ho, wo = diffs.shape
    sd = sign(diffs).reshape(n, c * m, ho * wo)
    out = np.matmul(sign(np.asarray(w, dtype=np.float64)).reshape(w.shape[0], -1), sd)
    return out.reshape(n, -1, ho, wo)


def split_index(xi: float, channels: int) -> int:
    """Number of leading channels routed to Bi-PDC (round half up)."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    return int(np.floor(xi * channels + 0.5))


def hybrid_layer(x: np.ndarray, xi: float, bipdc_w: np.ndarray | None, bconv_w: np.ndarray | None,
                 pattern: ProbePattern, spec: BinaryConvSpec, f=None) -> np.ndarray:
    """Channel-split layer: ``f(BiPDC(x[:, :s])) + f(BConv(x[:, s:]))`` on packed kernels.

    ``f`` is applied to each branch separately (identity when None); a
    branch with no input channels contributes nothing.
    """
    check_rank4(x)
    s = split_index(xi, x.shape[1])
    f = f or (lambda y, branch: y)
    out = 0
    if s > 0:
        out = out + f(bipdc_forward(x[:, :s], pack(bipdc_w), pattern, spec), "bipdc")
    if s < x.shape[1]:
        xb = pack(x[:, s:], spec.tau)
        out = out + f(bconv(xb, pack(bconv_w), spec), "bconv")
    return out


# --- differentiable versions used for training (float +-1 emulation) ---

def _binarize_weight(w: np.ndarray, spec: BinaryConvSpec):
    wb = sign(w)
    if spec.scale_mode == "per_channel_mean_abs":
        alpha = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
        return wb, alpha
    return wb, None


def _weight_grad(gwb: np.ndarray, w: np.ndarray, wb: np.ndarray, alpha, g_alpha, spec: BinaryConvSpec):
    gw = ste_backward(gwb, w, spec.ste_clip)
    if alpha is not None:
        k = wb[0].size
        gw = gw + g_alpha.reshape((-1,) + (1,) * (w.ndim - 1)) * wb / k
    return gw


def bconv_train(x: ag.Var, w: ag.Var, spec: BinaryConvSpec) -> ag.Var:
    """BConv with STE gradients for both activations and latent weights."""
    cs = spec.conv
    p = cs.padding
    pre = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) - spec.tau if p else x.data - spec.tau
    xb = np.where(pre >= 0, 1, -1).astype(x.data.dtype)
    wb, alpha = _binarize_weight(w.data, spec)
    inner = ConvSpec(cs.kernel_size, cs.stride, 0, cs.dilation, cs.groups)
    raw = conv2d(xb, wb, inner)
    out = raw if alpha is None else raw * alpha.reshape(1, -1, 1, 1)

    def fn(g):
        g_alpha = None if alpha is None else (g * raw).sum(axis=(0, 2, 3))
        graw = g if alpha is None else g * alpha.reshape(1, -1, 1, 1)
        gxb, gwb = conv2d_backward(graw, xb, wb, inner)
        gx = ste_backward(gxb, pre, spec.ste_clip)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return gx, _weight_grad(gwb, w.data, wb, alpha, g_alpha, spec)

    return ag._make(out, (x, w), fn)


def bipdc_train(x: ag.Var, w: ag.Var, pattern: ProbePattern, spec: BinaryConvSpec) -> ag.Var:
    """Bi-PDC with STE through the sign of each pixel difference."""
    _check_bipdc(x.data, w.data.shape, pattern, spec)
    diffs = pair_differences(x.data, pattern, spec.conv)
    n, c, m, ho, wo = diffs.shape
    db = np.where(diffs >= 0, 1, -1).astype(x.data.dtype).reshape(n, c * m, ho * wo)
    wb, alpha = _binarize_weight(w.data, spec)
    wflat = wb.reshape(wb.shape[0], -1)
    raw = np.matmul(wflat, db).reshape(n, -1, ho, wo)
    out = raw if alpha is None else raw * alpha.reshape(1, -1, 1, 1)

    def fn(g):
        g_alpha = None if alpha is None else (g * raw).sum(axis=(0, 2, 3))
        graw = g if alpha is None else g * alpha.reshape(1, -1, 1, 1)
        gflat = graw.reshape(n, -1, ho * wo)
        gwb = np.matmul(gflat, db.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gdb = np.matmul(wflat.T, gflat).reshape(diffs.shape)
        gx = pair_differences_backward(ste_backward(gdb, diffs, spec.ste_clip), x.data.shape, pattern, spec.conv)
        return gx, _weight_grad(gwb, w.data, wb, alpha, g_alpha, spec)

    return ag._make(out, (x, w), fn)


def sign_ste(x: ag.Var, tau: float = 0.0, clip: float = 1.0) -> ag.Var:
    pre = x.data - tau
    return ag._make(sign(pre), (x,), lambda g: (ste_backward(g, pre, clip),))
