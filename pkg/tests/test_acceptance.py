"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py).  Runtime
budgets are stated for 4 cores; they are scaled by 4 / (cores available)
so a smaller machine gets the same core-minutes.
"""
import math
import os
import time

import numpy as np
import pytest

from pidi import autograd as ag
from pidi.analysis import count_ops, fft2_magnitude, high_frequency_ratio, shifting_filter_spectra
from pidi.binary import BinaryConvSpec, bconv, bconv_reference, bipdc_forward, pack, sign
from pidi.blocks import CDCM, CSAM, NetworkSpec, ResNet18, build_bipidinet, build_pidinet, parse_config
from pidi.nn import replica_pool_array
from pidi.pdc import pdc_conv, pdc_forward_pairs, pdc_forward_reparam, probe_pattern, reparameterize
from pidi.pnm import Image
from pidi.synth import pink_noise_images, stack_edges, synth_cls_dataset, synth_edge_dataset
from pidi import train as T
from pidi.tensor import ConvSpec

from _acceptance import RESULTS
from _gradcheck import as_float64, check_op

KINDS = ("C", "A", "R")
CORES = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
BUDGET_SCALE = 4 / min(CORES, 4)


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# --- 1. re-parameterization equivalence -------------------------------------------

def test_01_reparam_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {np.float32: 0.0, np.float64: 0.0}
    cases = 0
    for kind in KINDS:
        p = probe_pattern(kind)
        for _ in range(500):
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
            c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h = int(rng.integers(p.window - 2 * pad if p.window > 2 * pad else 1, 12))
            w = int(rng.integers(p.window - 2 * pad if p.window > 2 * pad else 1, 12))
            h, w = max(h, 1), max(w, 1)
            spec = ConvSpec(p.window, stride, pad)
            x = rng.random((int(rng.integers(1, 3)), c, h, w))
            # weights at the layers' own (Kaiming) init scale, inputs in the image range
            wt = rng.normal(size=(o, c, 8)) * math.sqrt(2.0 / (8 * c))
            for dt in worst:
                xa, wa = x.astype(dt), wt.astype(dt)
                a = pdc_forward_pairs(xa, wa, p, spec)
                b = pdc_forward_reparam(xa, reparameterize(wa, p), spec)
                assert a.dtype == dt and b.dtype == dt
                worst[dt] = max(worst[dt], float(np.abs(a.astype(np.float64) - b).max()))
            cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst[np.float32] < 1e-6 and worst[np.float64] < 1e-12 and elapsed < 60 * BUDGET_SCALE
    record(1, ok, f"{cases} cases, max diff f32 {worst[np.float32]:.2e} f64 {worst[np.float64]:.2e}, "
                  f"{elapsed:.1f}s")


# --- 2. high-pass invariant --------------------------------------------------------

def test_02_high_pass():
    rng = np.random.default_rng(102)
    kernel_sum = 0.0
    exact = True
    dc = 0.0
    const = 0.0
    for kind in KINDS:
        p = probe_pattern(kind)
        for _ in range(100):
            w = rng.normal(size=(4, 3, 8))
            kernel_sum = max(kernel_sum, float(np.abs(reparameterize(w, p).sum(axis=(-1, -2))).max()))
            wi = rng.integers(-1000, 1000, size=(4, 3, 8)).astype(np.float64)
            exact &= bool(np.all(reparameterize(wi, p).sum(axis=(-1, -2)) == 0))
            x = np.full((1, 3, 9, 9), rng.uniform(-5, 5))
            const = max(const, float(np.abs(pdc_forward_pairs(x, w, p, ConvSpec(p.window))).max()))
            xb = np.full((1, 3, 9, 9), rng.uniform(-5, 5))
            bi = bipdc_forward(xb, pack(w), p, BinaryConvSpec(ConvSpec(p.window)))
            # every difference is 0 -> Sign(0) = +1, so the response is the weight-sign row sum
            const_bits = np.all(bi == sign(w).reshape(4, -1).sum(axis=1)[None, :, None, None])
            exact &= bool(const_bits)
        for s in shifting_filter_spectra(p, 16):
            dc = max(dc, float(s[8, 8]))
    ok = exact and kernel_sum < 1e-12 and dc == 0.0 and const < 1e-6
    record(2, ok, f"integer kernels sum to 0 exactly: {exact}; float kernel |sum| {kernel_sum:.1e}; "
                  f"filter DC {dc}; constant-input |out| {const:.1e}")


# --- 3. binary exactness -------------------------------------------------------------

def test_03_binary_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    mismatches = 0
    for i in range(1000):
        k = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        c, o = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        h, w = int(rng.integers(max(1, k - 2 * pad), 10)), int(rng.integers(max(1, k - 2 * pad), 10))
        tau = 0.0 if i % 2 == 0 else float(rng.normal(scale=0.3))
        x = rng.normal(size=(int(rng.integers(1, 3)), c, h, w))
        x[rng.random(x.shape) < 0.2] = tau  # Sign(tau - tau) = +1 boundary
        wt = rng.normal(size=(o, c, k, k))
        wt[rng.random(wt.shape) < 0.1] = 0.0
        spec = BinaryConvSpec(ConvSpec(k, stride, pad), tau=tau)
        if not np.array_equal(bconv(pack(x, tau), pack(wt), spec), bconv_reference(x, wt, spec)):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    record(3, mismatches == 0 and elapsed < 60 * BUDGET_SCALE, f"1000 cases, {mismatches} mismatches, {elapsed:.1f}s")


# --- 4. micro-structure preservation -------------------------------------------------

def test_04_micro_structure():
    tau = 0.5
    yy, xx = np.mgrid[0:8, 0:8]
    patch = (0.8 + 0.15 * ((yy + xx) % 2) + 0.03 * np.sin(yy))[None, None]  # all above tau, locally varying
    assert patch.min() > tau
    vanilla_bits = sign(patch, tau)
    diffs_bits = sign(pdc_forward_pairs(patch, np.eye(8)[:, None, :], probe_pattern("C"), ConvSpec(3)))
    ok = np.unique(vanilla_bits).size == 1 and np.unique(diffs_bits).size == 2
    record(4, ok, f"BConv bit values {np.unique(vanilla_bits).tolist()}, "
                  f"Bi-CPDC bit values {np.unique(diffs_bits).tolist()}")


# --- 5. gradient suite ------------------------------------------------------------------

def _gradient_cases():
    lp = T.LossParams()

    def conv(rng):
        spec = ConvSpec(3, int(rng.integers(1, 3)), 1)
        return lambda x, w, b: ag.conv2d(x, w, spec, b), [rng.normal(size=(2, 3, 6, 5)),
                                                           rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]

    def pdc(kind):
        def make(rng):
            p = probe_pattern(kind)
            spec = ConvSpec(p.window, int(rng.integers(1, 3)), p.window // 2)
            return lambda x, w: pdc_conv(x, w, p, spec), [rng.normal(size=(1, 2, 7, 6)), rng.normal(size=(3, 2, 8))]
        return make

    def edge(rng):
        gt = rng.choice([0.0, 0.25, 0.5, 1.0], size=(2, 1, 5, 5))
        return lambda p: T.edge_loss_var([ag.sigmoid(p)], gt, lp), [rng.normal(size=gt.shape)]

    def ce(rng):
        y = rng.integers(0, 5, 4)
        return lambda z: T.cross_entropy_var(z, y), [rng.normal(size=(4, 5))]

    def cdcm(rng):
        m = as_float64(CDCM(6, 3, rng=rng))
        return lambda v: m(v), [rng.normal(size=(1, 6, 10, 10))]

    def csam(rng):
        m = as_float64(CSAM(6, rng=rng))
        return lambda v: m(v), [rng.normal(size=(1, 6, 6, 6))]

    return {
        "conv2d": conv,
        "pdc_C": pdc("C"), "pdc_A": pdc("A"), "pdc_R": pdc("R"),
        "maxpool": lambda r: (lambda v: ag.pool2x2(v, "max"), [r.normal(size=(2, 2, 4, 6))]),
        "avgpool": lambda r: (lambda v: ag.pool2x2(v, "avg"), [r.normal(size=(2, 2, 4, 6))]),
        "upsample": lambda r: (lambda v: ag.upsample(v, 7, 9), [r.normal(size=(1, 2, 3, 4))]),
        "relu": lambda r: (ag.relu, [r.normal(size=(2, 3, 4, 4))]),
        "prelu": lambda r: (ag.prelu, [r.normal(size=(2, 3, 4, 4)), r.uniform(0.05, 0.5, 3)]),
        "sigmoid": lambda r: (ag.sigmoid, [r.normal(size=(2, 3, 4, 4)) * 3]),
        "cdcm": cdcm, "csam": csam, "edge_loss": edge, "cross_entropy": ce,
    }


def test_05_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, make in _gradient_cases().items():
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(500 + seed)
            op, arrays = make(rng)
            errs.append(check_op(op, arrays, rng, max_coords=10))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 300 * BUDGET_SCALE
    record(5, ok, f"{len(worst)} ops x 20 seeds, worst rel err {worst[top]:.1e} ({top}), {elapsed:.1f}s")


# --- 6. ReplicaPool -----------------------------------------------------------------------

def brute_replica_pool(x, m, n):
    b, c, h, w = x.shape
    out = np.zeros((b, m * c + c // n, h // 2, w // 2))
    for i in range(b):
        for y in range(h // 2):
            for xx in range(w // 2):
                pooled = [np.mean(x[i, ch, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2]) for ch in range(c)]
                vals = pooled * m + [np.mean(pooled[g * n:(g + 1) * n]) for g in range(c // n)]
                out[i, :, y, xx] = vals
    return out


def test_06_replica_pool():
    x = np.broadcast_to(np.arange(4.0)[None, :, None, None], (1, 4, 4, 4)).copy()
    hand = replica_pool_array(x, 2, 2)[0, :, 0, 0].tolist()
    hand_ok = hand == [0, 1, 2, 3, 0, 1, 2, 3, 0.5, 2.5]
    rng = np.random.default_rng(106)
    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(1, 9))
        divisors = [d for d in range(1, c + 1) if c % d == 0]
        n = int(rng.choice(divisors))
        m = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), c, 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))))
        worst = max(worst, float(np.abs(replica_pool_array(x, m, n) - brute_replica_pool(x, m, n)).max()))
    record(6, hand_ok and worst < 1e-12, f"hand trace {hand}; 200 random shapes max diff {worst:.1e}")


# --- 7. cost counter --------------------------------------------------------------------

def test_07_cost_counter():
    t0 = time.perf_counter()
    fp = count_ops(ResNet18(binary=False), (1, 3, 224, 224))
    br = count_ops(ResNet18(binary=True), (1, 3, 224, 224))
    checks = [
        abs(fp.flops / 17.70e8 - 1) < 0.05,
        abs(fp.fp_params / 11.18e6 - 1) < 0.02,
        abs(fp.memory_bits / 358e6 - 1) < 0.02,
        abs(br.flops / 1.42e8 - 1) < 0.10,
        abs(br.bops / 16.76e8 - 1) < 0.10,
        abs(br.ops / 1.69e8 - 1) < 0.10,
        fp.ops == fp.flops + fp.bops / 64 and br.ops == br.flops + br.bops / 64,
    ]
    elapsed = time.perf_counter() - t0
    record(7, all(checks) and elapsed < 10 * BUDGET_SCALE,
           f"FP flops {fp.flops / 1e8:.2f}e8 params {fp.fp_params / 1e6:.2f}M mem {fp.memory_bits / 1e6:.1f}Mbit; "
           f"Bi-Real flops {br.flops / 1e8:.2f}e8 bops {br.bops / 1e8:.2f}e8 ops {br.ops / 1e8:.2f}e8; {elapsed:.1f}s")


# --- 8. edge-loss hand values ---------------------------------------------------------------

def test_08_edge_loss_hand_values():
    lp = T.LossParams(1.1, 0.3)
    # y = 0.2 sits in the dead band for any p
    band = [T.edge_loss(np.array([[[[p, 0.5]]]]), np.array([[[[0.2, 1.0]]]]), lp)
            - T.edge_loss(np.array([[[[0.5, 0.5]]]]), np.array([[[[0.2, 1.0]]]]), lp) for p in (0.01, 0.3, 0.99)]
    # y = 1 with p -> 1 contributes (almost) nothing
    perfect = T.edge_loss(np.array([[[[1 - 1e-12]]]]), np.array([[[[1.0]]]]), lp)
    # beta = 0.8 image: four negatives at p = 0.5 and one positive predicted perfectly
    gt = np.array([0, 0, 0, 0, 1.0]).reshape(1, 1, 1, 5)
    lmap = T.edge_loss_map(np.array([0.5] * 4 + [1 - 1e-12]).reshape(1, 1, 1, 5), gt, lp)
    hand = 0.22 * math.log(2)
    grad = T.edge_loss_grad(np.full((1, 1, 2, 3), 0.4), np.array([0, 0.1, 0.29, 0, 1, 0.3]).reshape(1, 1, 2, 3), lp)
    ok = (max(abs(b) for b in band) < 1e-10 and perfect < 1e-6 and abs(lmap[0, 0, 0, 0] - hand) < 1e-10
          and np.all(grad[0, 0, 0, 1:] == 0) and grad[0, 0, 0, 0] != 0)
    record(8, ok, f"dead band delta {max(abs(b) for b in band):.1e}; y=1,p->1 loss {perfect:.1e}; "
                  f"beta=0.8 negative pixel {lmap[0, 0, 0, 0]:.12f} vs 0.22 ln2 {hand:.12f}")


# --- 9 / 12. desk-scale edge training and export fidelity --------------------------------

@pytest.fixture(scope="module")
def edge_training():
    t0 = time.perf_counter()
    X, G = stack_edges(synth_edge_dataset(0, 512))
    Xt, Gt = stack_edges(synth_edge_dataset(1, 64))
    spec = NetworkSpec(task="edge", block_kinds=parse_config("[CARV]x4"), base_channels=20)
    model = build_pidinet(spec, seed=0)
    opt = T.Adam(model.parameters(), lr=T.EDGE_LR)
    hist = T.train_loop(model, (X, G), T.edge_batch_loss(), opt, 10, seed=0, batch_size=8,
                        schedule=T.edge_schedule(10))
    f1 = T.pixel_f1(T.predict_edges(model, Xt), Gt)
    return model, hist, f1, time.perf_counter() - t0, Xt


def test_09_edge_training(edge_training):
    model, hist, f1, elapsed, _ = edge_training
    losses = hist.losses
    ratio = losses[-1] / losses[0]
    ok = all(np.isfinite(losses)) and ratio < 0.5 and f1 >= 0.70 and elapsed < 15 * 60 * BUDGET_SCALE
    record(9, ok, f"loss {losses[0]:.0f} -> {losses[-1]:.0f} (ratio {ratio:.3f}), held-out F1 {f1:.3f}, "
                  f"{elapsed / 60:.1f} min on {CORES} core(s)")


def test_12_export_fidelity(edge_training):
    model, _, _, _, Xt = edge_training
    exported = model.reparameterized()
    worst = 0
    for x in Xt[:20]:
        a = Image.from_float(model(x[None])[-1].data[0, 0]).data.astype(int)
        b = Image.from_float(exported(x[None])[-1].data[0, 0]).data.astype(int)
        worst = max(worst, int(np.abs(a - b).max()))
    record(12, worst <= 1, f"20 images, max 8-bit difference {worst} gray level(s)")


# --- 10. desk-scale binary classification ------------------------------------------------

CLS_EPOCHS = 10
CLS_BATCH = 32
CLS_DESK_LR = 0.002  # desk-scale recipe: twice the base rate with linear decay


def _cls_run(data, xi, seed):
    (X, y), (Xt, yt) = data
    spec = NetworkSpec(task="classify", xi=xi, stem_channels=32, stem_stride=2, stage_widths=[32, 64, 128],
                       stage_layers=[2, 2, 2], num_classes=10)
    model = build_bipidinet(spec, seed=seed)
    opt = T.Adam(model.parameters(), lr=CLS_DESK_LR)
    T.train_loop(model, (X, y), T.cls_batch_loss, opt, CLS_EPOCHS, seed=seed, batch_size=CLS_BATCH,
                 schedule=T.cls_schedule(CLS_EPOCHS, CLS_DESK_LR))
    return T.accuracy(model, Xt, yt)


def test_10_binary_classification():
    data = (synth_cls_dataset(100, 8000), synth_cls_dataset(200, 1000))
    acc = {}
    times = []
    for xi in (0.2, 0.0):
        for seed in range(3):
            t0 = time.perf_counter()
            acc[(xi, seed)] = _cls_run(data, xi, seed)
            times.append(time.perf_counter() - t0)
    mean02 = np.mean([acc[(0.2, s)] for s in range(3)])
    mean00 = np.mean([acc[(0.0, s)] for s in range(3)])
    per_run = max(times)
    ok = (min(acc[(0.2, s)] for s in range(3)) >= 0.90 and mean02 >= mean00 - 0.005
          and per_run < 20 * 60 * BUDGET_SCALE)
    record(10, ok, f"xi=0.2 acc {[round(acc[(0.2, s)], 3) for s in range(3)]} (mean {mean02:.3f}); "
                   f"xi=0 acc {[round(acc[(0.0, s)], 3) for s in range(3)]} (mean {mean00:.3f}); "
                   f"slowest run {per_run / 60:.1f} min on {CORES} core(s)")


# --- 11. spectrum property -------------------------------------------------------------------

def test_11_spectrum_sign_test():
    from scipy.stats import binomtest

    imgs = pink_noise_images(11, 100, 64).astype(np.float64)
    rng = np.random.default_rng(111)
    wp, wc = rng.normal(size=(16, 1, 8)), rng.normal(size=(16, 1, 3, 3))
    spec = BinaryConvSpec(ConvSpec(3, 1, 1), tau=0.5)
    wins = 0
    ratios = []
    for x in imgs:
        pdc_map = bipdc_forward(x[None], pack(wp), probe_pattern("C"), spec)[0].mean(axis=0)
        van_map = bconv(pack(x[None], spec.tau), pack(wc), spec)[0].mean(axis=0)
        r = (high_frequency_ratio(fft2_magnitude(pdc_map)), high_frequency_ratio(fft2_magnitude(van_map)))
        ratios.append(r)
        wins += r[0] > r[1]
    p = binomtest(wins, len(imgs), 0.5, alternative="greater").pvalue
    mean = np.mean(ratios, axis=0)
    record(11, p < 0.05 and mean[0] > mean[1],
           f"high-frequency share Bi-CPDC {mean[0]:.3f} vs BConv {mean[1]:.3f}; {wins}/100 wins, p={p:.1e}")
