"""Randomised property checks driven by hypothesis."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pidi.analysis import fft2_magnitude, transitions
from pidi.binary import BinaryConvSpec, bconv, bconv_reference, pack
from pidi.blocks import parse_config, render_config
from pidi.nn import replica_factors
from pidi.pdc import pdc_forward_pairs, pdc_forward_reparam, probe_pattern, reparameterize
from pidi.pnm import Image, decode, encode
from pidi.tensor import ConvSpec

finite = st.floats(-4, 4, allow_nan=False, width=64)
SETTINGS = settings(max_examples=40, deadline=None)


@SETTINGS
@given(st.integers(1, 3), st.integers(1, 150), st.integers(0, 2 ** 32 - 1))
def test_pack_roundtrip(rows, n, seed):
    x = np.random.default_rng(seed).normal(size=(rows, n))
    assert np.array_equal(pack(x).unpack(np.float64), np.where(x >= 0, 1.0, -1.0))


@SETTINGS
@given(st.sampled_from("CAR"), st.integers(1, 2), st.integers(0, 2), st.integers(0, 2 ** 32 - 1))
def test_reparam_equivalence(kind, stride, pad, seed):
    rng = np.random.default_rng(seed)
    p = probe_pattern(kind)
    x = rng.normal(size=(1, 2, 7, 8))
    w = rng.normal(size=(3, 2, 8))
    spec = ConvSpec(p.window, stride, pad)
    diff = pdc_forward_pairs(x, w, p, spec) - pdc_forward_reparam(x, reparameterize(w, p), spec)
    assert np.abs(diff).max() < 1e-12


@SETTINGS
@given(st.integers(1, 3), st.integers(0, 1), st.floats(-0.5, 0.5), st.integers(0, 2 ** 32 - 1))
def test_bconv_packed_equals_oracle(stride, pad, tau, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 6, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    spec = BinaryConvSpec(ConvSpec(3, stride, pad), tau=tau)
    assert np.array_equal(bconv(pack(x, tau), pack(w), spec), bconv_reference(x, w, spec))


@SETTINGS
@given(st.integers(0, 255))
def test_transitions_even_and_rotation_invariant(code):
    t = transitions(code)
    assert t % 2 == 0 and 0 <= t <= 8
    rot = ((code << 1) | (code >> 7)) & 0xFF
    assert transitions(rot) == t


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_parseval(m):
    assert np.isclose(np.sum(m ** 2), np.sum(fft2_magnitude(m) ** 2) / m.size, rtol=1e-6, atol=1e-9)


@SETTINGS
@given(st.lists(st.sampled_from("CARV"), min_size=16, max_size=16))
def test_config_render_roundtrip(kinds):
    assert parse_config(render_config(kinds)) == kinds


@SETTINGS
@given(st.integers(1, 64), st.integers(1, 200))
def test_replica_factors_cover(cin, extra):
    cout = cin + extra
    m, n = replica_factors(cin, cout)
    assert m >= 1 and cin % n == 0 and m * cin + cin // n >= cout


@SETTINGS
@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3]))), st.booleans())
def test_pnm_roundtrip(data, binary):
    assert np.array_equal(decode(encode(Image(data), binary)).data, data)
