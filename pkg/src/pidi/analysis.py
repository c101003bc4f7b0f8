"""Frequency analysis, cost accounting and LBP statistics of binary kernels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pdc import RING, ProbePattern

# Cost convention: one multiply-accumulate counts as one FLOP (or one BOP).
BOPS_PER_OP = 64


@dataclass
class CostReport:
    flops: int = 0
    bops: int = 0
    fp_params: int = 0
    b_params: int = 0

    @property
    def ops(self) -> float:
        return self.flops + self.bops / BOPS_PER_OP

    @property
    def memory_bits(self) -> int:
        return 32 * self.fp_params + self.b_params

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.flops + other.flops, self.bops + other.bops,
                          self.fp_params + other.fp_params, self.b_params + other.b_params)

    def as_dict(self) -> dict:
        return {"flops": self.flops, "bops": self.bops, "ops": self.ops, "fp_params": self.fp_params,
                "b_params": self.b_params, "memory_bits": self.memory_bits}

    def table(self) -> str:
        rows = [("FLOPs (x1e8)", self.flops / 1e8), ("BOPs (x1e8)", self.bops / 1e8),
                ("OPs (x1e8)", self.ops / 1e8), ("FP-params (x1e6)", self.fp_params / 1e6),
                ("B-params (x1e6)", self.b_params / 1e6), ("Memory (Mbit)", self.memory_bits / 1e6)]
        return "\n".join(f"{name:<18}{val:>12.4f}" for name, val in rows)

    def key_values(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())


def count_ops(network, input_shape) -> CostReport:
    """Walk ``network`` for an NCHW ``input_shape`` and total its cost.

    Full-precision conv/linear layers add MACs to ``flops``, binary layers add
    MACs to ``bops``; a layer built with ``classifier=True`` is skipped.
    """
    report = CostReport()
    network.cost(tuple(input_shape), report)
    return report


# --- frequency domain ---------------------------------------------------------

def fft2_magnitude(m: np.ndarray) -> np.ndarray:
    """Centred magnitude of the 2-D DFT of an HxW map."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(m)))


def log_spectrum(mag: np.ndarray) -> np.ndarray:
    return np.log1p(mag)


def shift_filter(offsets_and_weights, size: int) -> np.ndarray:
    """Embed a sparse filter ``[((dy, dx), weight), ...]`` into a periodic size x size grid."""
    f = np.zeros((size, size))
    for (dy, dx), wgt in offsets_and_weights:
        f[dy % size, dx % size] += wgt
    return f


def shifting_filters(pattern: ProbePattern | int, size: int) -> list[np.ndarray]:
    """Shifting filters of a layer: one-hot shifts for a vanilla ``k x k`` kernel, or
    ``+1`` at the sampled / ``-1`` at the reference offset for each PDC pair."""
    if isinstance(pattern, ProbePattern):
        return [shift_filter([(s, 1.0), (r, -1.0)], size) for s, r in pattern.pairs]
    k = int(pattern)
    r = k // 2
    return [shift_filter([((dy, dx), 1.0)], size) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def shifting_filter_spectra(pattern: ProbePattern | int, size: int = 32, log: bool = False) -> list[np.ndarray]:
    out = [fft2_magnitude(f) for f in shifting_filters(pattern, size)]
    return [log_spectrum(s) for s in out] if log else out


def high_frequency_ratio(mag: np.ndarray) -> float:
    """Share of spectral energy outside the central quarter (H/2 x W/2) of a centred spectrum."""
    e = np.asarray(mag, dtype=np.float64) ** 2
    h, w = e.shape
    total = e.sum()
    if total == 0:
        return 0.0
    y0, x0 = h // 2 - h // 4, w // 2 - w // 4
    low = e[y0: y0 + h // 2, x0: x0 + w // 2].sum()
    return float((total - low) / total)


def feature_spectrum(tap_fn, inputs: np.ndarray, tap=None) -> np.ndarray:
    """Channel-averaged feature map -> centred |FFT2|, averaged over the batch.

    ``tap_fn(inputs)`` must return either an NCHW array or a mapping of named
    NCHW arrays, in which case ``tap`` selects one.
    """
    feats = tap_fn(inputs)
    if isinstance(feats, dict):
        if tap not in feats:
            raise KeyError(f"unknown tap {tap!r}; available: {sorted(feats)}")
        feats = feats[tap]
    feats = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
    mean_maps = feats.mean(axis=1)
    return np.mean([fft2_magnitude(m) for m in mean_maps], axis=0)


def spectrum_csv(mag: np.ndarray) -> str:
    return "\n".join(",".join(f"{v:.9g}" for v in row) for row in mag)


# --- LBP statistics ---------------------------------------------------------------

# circular read order over the 3x3 ring (top-left first), shared with APDC
_RING_INDEX = [(dy + 1, dx + 1) for dy, dx in RING]


def lbp_code(bits3x3: np.ndarray) -> int:
    """8-bit code read around the ring; the first bit read is the most significant."""
    code = 0
    for y, x in _RING_INDEX:
        code = (code << 1) | int(bits3x3[y, x])
    return code


def transitions(code: int, p: int = 8) -> int:
    """Number of circular 0/1 changes in a ``p``-bit code."""
    rotated = ((code >> 1) | ((code & 1) << (p - 1))) & ((1 << p) - 1)
    return bin(code ^ rotated).count("1")


def is_uniform(code: int, max_transitions: int = 4) -> bool:
    return transitions(code) <= max_transitions


@dataclass
class LbpStats:
    counts: np.ndarray          # (256,) occurrences of each code
    order: np.ndarray           # codes sorted by decreasing frequency
    uniform: np.ndarray         # (256,) bool flags
    uniform_fraction: float     # share of kernels with a uniform code


def lbp_pattern_stats(weights, max_transitions: int = 4) -> LbpStats:
    """Histogram of ring codes over all 3x3 binary kernels (centre bit ignored)."""
    from .binary import BitTensor

    bits = weights.bits() if isinstance(weights, BitTensor) else (np.asarray(weights) >= 0).astype(np.uint8)
    if bits.ndim != 4 or bits.shape[-2:] != (3, 3):
        raise ValueError(f"LBP statistics need (*, *, 3, 3) kernels, got shape {bits.shape}")
    flat = bits.reshape(-1, 3, 3)
    codes = np.zeros(len(flat), dtype=np.int64)
    for y, x in _RING_INDEX:
        codes = (codes << 1) | flat[:, y, x]
    counts = np.bincount(codes, minlength=256)
    uniform = np.array([is_uniform(c, max_transitions) for c in range(256)])
    order = np.lexsort((np.arange(256), -counts))
    frac = float(counts[uniform].sum() / max(1, counts.sum()))
    return LbpStats(counts, order, uniform, frac)


def histogram_csv(stats: LbpStats) -> str:
    lines = ["code,bits,count,transitions,uniform"]
    for c in stats.order:
        lines.append(f"{c},{c:08b},{stats.counts[c]},{transitions(int(c))},{int(stats.uniform[c])}")
    return "\n".join(lines)
