"""Deterministic synthetic datasets for edge detection and shape classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SS = 4  # supersampling factor for anti-aliasing
GT_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
N_ANNOTATORS = 4


@dataclass
class EdgeSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    gt: np.ndarray     # (1, H, W) annotator consensus on a 5-level grid


def _grid(size: int):
    """Supersampled pixel-centre coordinates in [0, size)."""
    t = (np.arange(size * SS) + 0.5) / SS
    return np.meshgrid(t, t, indexing="ij")


def _downsample(mask: np.ndarray, size: int) -> np.ndarray:
    return mask.reshape(size, SS, size, SS).mean(axis=(1, 3))


def polygon_mask(ys: np.ndarray, xs: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test; ``verts`` is (K, 2) of (y, x)."""
    inside = np.zeros(ys.shape, dtype=bool)
    k = len(verts)
    for i in range(k):
        y0, x0 = verts[i]
        y1, x1 = verts[(i + 1) % k]
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < xcross)
    return inside


def _shading(rng, size, base):
    """Linear colour gradient around ``base`` (3,) over a size x size image."""
    gy, gx = rng.uniform(-0.12, 0.12, 2)
    t = (np.arange(size) / max(size - 1, 1)) - 0.5
    ramp = gy * t[:, None] + gx * t[None, :]
    return np.clip(base[:, None, None] + ramp[None], 0, 1)


def _random_shape(rng, ys, xs, size):
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    r = rng.uniform(0.12, 0.3) * size
    if rng.random() < 0.5:
        a, b = r, r * rng.uniform(0.5, 1.0)
        th = rng.uniform(0, np.pi)
        u = (ys - cy) * np.cos(th) + (xs - cx) * np.sin(th)
        v = -(ys - cy) * np.sin(th) + (xs - cx) * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 < 1
    k = rng.integers(3, 7)
    ang = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(0, 2 * np.pi) + rng.uniform(-0.3, 0.3, k)
    rad = r * rng.uniform(0.8, 1.2, k)
    verts = np.stack([cy + rad * np.sin(ang), cx + rad * np.cos(ang)], axis=1)
    return polygon_mask(ys, xs, verts)


def _boundary(labels: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from a 4-neighbour (image border excluded)."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def _dilate(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy: dy + h, dx: dx + w]
    return out


def _luma(c):
    return float(np.dot(c, (0.299, 0.587, 0.114)))


def _pick_colour(rng, avoid, min_gap=0.25, tries=64):
    """Random colour whose luma differs from every value in ``avoid`` by ``min_gap``.

    Falls back to the best of ``tries`` candidates when the gap is unattainable.
    """
    best, best_gap = None, -1.0
    for _ in range(tries):
        c = rng.uniform(0.05, 0.95, 3)
        gap = min(abs(_luma(c) - a) for a in avoid)
        if gap >= min_gap:
            return c
        if gap > best_gap:
            best, best_gap = c, gap
    return best


def edge_sample(rng: np.random.Generator, size: int = 64, noise: float = 0.02) -> EdgeSample:
    ys, xs = _grid(size)
    while True:
        bg = rng.uniform(0.1, 0.9, 3)
        image = _shading(rng, size, bg)
        labels = np.zeros((size, size), dtype=np.int32)
        lumas = [_luma(bg)]
        for s in range(1, rng.integers(1, 4) + 1):
            cover = _downsample(_random_shape(rng, ys, xs, size).astype(np.float64), size)
            if not np.any(cover >= 0.5):
                continue
            colour = _pick_colour(rng, lumas[-2:])
            lumas.append(_luma(colour))
            image = image * (1 - cover) + _shading(rng, size, colour) * cover
            labels[cover >= 0.5] = s
        if labels.max() == 0:
            continue
        core = _boundary(labels)
        ring = _dilate(core) & ~core
        gt = np.zeros((size, size))
        gt[ring] = 0.25
        votes = np.maximum(rng.binomial(N_ANNOTATORS, 0.9, size=(size, size)), 1)
        gt[core] = votes[core] / N_ANNOTATORS
        frac = np.mean(gt > 0)
        if 0.005 <= frac <= 0.15:
            break
    image = np.clip(image + rng.normal(0, noise, image.shape), 0, 1)
    return EdgeSample(image.astype(np.float32), gt[None].astype(np.float32))


def synth_edge_dataset(seed: int, count: int, size: int = 64) -> list[EdgeSample]:
    """Random shaded polygons/ellipses with multi-annotator boundary labels."""
    rng = np.random.default_rng(seed)
    return [edge_sample(rng, size) for _ in range(count)]


def stack_edges(samples: list[EdgeSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.gt for s in samples])


# --- classification --------------------------------------------------------------

CLASS_NAMES = ("disk", "ring", "square", "frame", "triangle", "star", "plus", "crescent", "ellipse", "dots")


def _star(u, v):
    ang = np.arange(10) * np.pi / 5 + np.pi / 2
    rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
    verts = np.stack([rad * np.sin(ang), rad * np.cos(ang)], axis=1)
    return polygon_mask(v, u, verts)


def _shape_fn(label: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    box = np.maximum(np.abs(u), np.abs(v))
    if label == 0:
        return r < 0.9
    if label == 1:
        return (r < 1.0) & (r > 0.55)
    if label == 2:
        return box < 0.75
    if label == 3:
        return (box < 0.85) & (box > 0.5)
    if label == 4:
        return (v > -0.5) & (np.sqrt(3) * u + v < 1) & (-np.sqrt(3) * u + v < 1)
    if label == 5:
        return _star(u, v)
    if label == 6:
        return ((np.abs(u) < 0.3) & (np.abs(v) < 0.95)) | ((np.abs(v) < 0.3) & (np.abs(u) < 0.95))
    if label == 7:
        return (r < 1.0) & (np.hypot(u - 0.45, v) > 0.75)
    if label == 8:
        return u ** 2 + (v / 0.4) ** 2 < 1
    if label == 9:
        return (np.hypot(u - 0.55, v) < 0.38) | (np.hypot(u + 0.55, v) < 0.38)
    raise ValueError(f"unknown class {label}")


def cls_sample(rng: np.random.Generator, label: int, size: int = 32, noise: float = 0.04) -> np.ndarray:
    ys, xs = _grid(size)
    scale = rng.uniform(0.28, 0.4) * size
    cy, cx = size / 2 + rng.uniform(-0.12, 0.12, 2) * size
    th = rng.uniform(0, 2 * np.pi)
    dy, dx = (ys - cy) / scale, (xs - cx) / scale
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    cover = _downsample(_shape_fn(label, u, v).astype(np.float64), size)
    bg = rng.uniform(0.05, 0.95, 3)
    fg = _pick_colour(rng, [_luma(bg)], 0.3)
    img = _shading(rng, size, bg) * (1 - cover) + _shading(rng, size, fg) * cover
    return np.clip(img + rng.normal(0, noise, img.shape), 0, 1).astype(np.float32)


def synth_cls_dataset(seed: int, count: int, size: int = 32, classes: int = 10):
    """Balanced labelled shape images ``(images (N,3,S,S), labels (N,))``."""
    if not 1 <= classes <= len(CLASS_NAMES):
        raise ValueError(f"classes must be in 1..{len(CLASS_NAMES)}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes)
    images = np.stack([cls_sample(rng, int(l), size) for l in labels])
    return images, labels.astype(np.int64)


def pink_noise_images(seed: int, count: int, size: int = 64, exponent: float = 1.0) -> np.ndarray:
    """Grayscale images with a 1/f^exponent amplitude spectrum, scaled to [0, 1]; (N, 1, S, S)."""
    rng = np.random.default_rng(seed)
    f = np.hypot(*np.meshgrid(np.fft.fftfreq(size), np.fft.fftfreq(size), indexing="ij"))
    f[0, 0] = 1.0
    amp = f ** -exponent
    amp[0, 0] = 0.0
    out = []
    for _ in range(count):
        phase = np.exp(2j * np.pi * rng.random((size, size)))
        img = np.real(np.fft.ifft2(amp * phase))
        img = (img - img.min()) / (img.max() - img.min())
        out.append(img)
    return np.stack(out)[:, None].astype(np.float32)
