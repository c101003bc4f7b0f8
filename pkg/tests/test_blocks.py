import numpy as np
import pytest

from pidi import autograd as ag
from pidi.analysis import count_ops
from pidi.blocks import (CDCM, CSAM, ConfigError, NetworkSpec, build_bipidinet, build_pidinet, parse_config,
                         render_config, resnet18_bipidinet_spec)
from pidi.nn import BiPdcConv2d, PdcConv2d, ReplicaPool, replica_factors, replica_pool_array
from pidi.tensor import ShapeError

from _gradcheck import as_float64, check_op


# --- configuration grammar ---------------------------------------------------------

def test_parse_adopted_and_baselines():
    assert parse_config("[CARV]x4") == list("CARV") * 4
    assert parse_config("C-[V]x15") == ["C"] + ["V"] * 15
    assert parse_config("[V]x16") == ["V"] * 16
    assert parse_config("[CARV]×4") == list("CARV") * 4


@pytest.mark.parametrize("bad,pos", [("[CARV]x3", 8), ("[CAQV]x4", 3), ("[CARV]4", 6), ("C-", 2), ("CC", 1),
                                     ("[]x16", 1), ("[CARV]x4-", 9)])
def test_parse_errors_report_position(bad, pos):
    with pytest.raises(ConfigError) as e:
        parse_config(bad)
    assert e.value.position == pos


def test_render_roundtrip():
    rng = np.random.default_rng(0)
    for s in ("[CARV]x4", "C-[V]x15", "[V]x16", "[CA]x8"):
        assert parse_config(render_config(parse_config(s))) == parse_config(s)
    assert render_config(parse_config("[CARV]x2-[CARV]x2")) == "[CARV]x4"
    for _ in range(50):
        kinds = list(rng.choice(list("CARV"), 16))
        assert parse_config(render_config(kinds)) == kinds


def test_spec_string_roundtrip():
    spec = NetworkSpec(task="edge", block_kinds=parse_config("C-[V]x15"), base_channels=20, with_csam=False)
    again = NetworkSpec.from_string(spec.to_string())
    assert again == spec
    with pytest.raises(ValueError):
        NetworkSpec.from_string("task=edge;bogus=1")


# --- PiDiNet -------------------------------------------------------------------

def _params(model):
    return sum(p.data.size for p in model.parameters())


def test_pidinet_parameter_count_near_710k():
    n = _params(build_pidinet(NetworkSpec(task="edge")))
    assert abs(n - 710_000) / 710_000 < 0.05


def test_pidinet_light_is_smaller():
    full = _params(build_pidinet(NetworkSpec(task="edge")))
    light = _params(build_pidinet(NetworkSpec(task="edge", with_csam=False, with_cdcm=False)))
    assert light < full


def test_pidinet_outputs():
    net = build_pidinet(NetworkSpec(task="edge", base_channels=8), seed=1)
    x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
    maps = net(x)
    assert len(maps) == 5
    for m in maps:
        assert m.shape == (1, 1, 64, 64)
        assert np.all(np.isfinite(m.data)) and np.all((m.data >= 0) & (m.data <= 1))


def test_reparam_export_matches_on_random_inputs():
    net = build_pidinet(NetworkSpec(task="edge", base_channels=8), seed=2)
    exported = net.reparameterized()
    assert not any(isinstance(m, PdcConv2d) for m in exported.modules())
    r_kernels = [m.weight.data.shape for m in exported.modules() if getattr(m, "weight", None) is not None
                 and m.weight.data.ndim == 4 and m.weight.data.shape[-1] == 5]
    assert len(r_kernels) == 4  # one RPDC per [CARV] group
    x = np.random.default_rng(1).random((2, 3, 32, 32), dtype=np.float32)
    for a, b in zip(net(x), exported(x)):
        assert np.abs(a.data - b.data).max() < 1e-5


def test_cdcm_properties():
    rng = np.random.default_rng(3)
    cdcm = CDCM(12, 5, rng=rng)
    x = rng.normal(size=(1, 12, 9, 9)).astype(np.float32)
    assert cdcm(ag.constant(x)).shape == (1, 5, 9, 9)
    assert not cdcm(ag.constant(np.zeros_like(x))).data.any()
    with pytest.raises(ValueError):
        CDCM(8, 8)


def test_csam_properties():
    rng = np.random.default_rng(4)
    csam = CSAM(8, rng=rng)
    x = rng.normal(size=(2, 8, 7, 7)).astype(np.float32)
    att = csam.attention(ag.constant(x)).data
    assert np.all((att > 0) & (att < 1))
    y = csam(ag.constant(x)).data
    assert y.shape == x.shape and np.all(np.abs(y) <= np.abs(x))


def test_composite_module_gradients():
    rng = np.random.default_rng(5)
    cdcm = as_float64(CDCM(6, 3, rng=rng))
    csam = as_float64(CSAM(6, rng=rng))
    x = rng.normal(size=(1, 6, 12, 12))
    assert check_op(lambda v: cdcm(v), [x], rng) < 1e-6
    assert check_op(lambda v: csam(v), [x], rng) < 1e-6


# --- ReplicaPool ------------------------------------------------------------------

def test_replica_pool_hand_trace():
    x = np.broadcast_to(np.arange(4.0)[None, :, None, None], (1, 4, 4, 4)).copy()
    y = replica_pool_array(x, 2, 2)
    assert y.shape == (1, 10, 2, 2)
    np.testing.assert_array_equal(y[0, :, 0, 0], [0, 1, 2, 3, 0, 1, 2, 3, 0.5, 2.5])


def test_replica_pool_full_mean_and_errors():
    x = np.random.default_rng(6).normal(size=(1, 6, 4, 4))
    y = replica_pool_array(x, 1, 6)
    pooled = x.reshape(1, 6, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(y[:, -1], pooled.mean(axis=1))
    with pytest.raises(ShapeError):
        replica_pool_array(x, 2, 4)
    assert ReplicaPool(2, 2).parameters() == []


def test_replica_factors_cover_target():
    for cin, cout in [(32, 64), (64, 128), (128, 192), (192, 384), (384, 768), (10, 17)]:
        m, n = replica_factors(cin, cout)
        assert cin % n == 0 and m * cin + cin // n >= cout
    assert replica_factors(128, 192) == (1, 2)


# --- Bi-PiDiNet -------------------------------------------------------------------

def test_bipidinet_forward_backward_smoke():
    net = build_bipidinet(NetworkSpec(task="classify", xi=0.2, stem_stride=2), seed=0)
    x = np.random.default_rng(7).random((2, 3, 32, 32), dtype=np.float32)
    logits = net(x)
    assert logits.shape == (2, 10)
    logits.backward(np.ones_like(logits.data))
    for name, p in net.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
    assert any(isinstance(m, BiPdcConv2d) for m in net.modules())


def test_bipidinet_xi_zero_has_no_bipdc_and_same_bconv_weights():
    spec0 = NetworkSpec(task="classify", xi=0.0)
    net0 = build_bipidinet(spec0, seed=3)
    assert not any(isinstance(m, BiPdcConv2d) for m in net0.modules())


def test_widened_resnet18_layout_cost():
    spec = resnet18_bipidinet_spec()
    assert spec.stage_widths == [128, 192, 384, 768]
    r = count_ops(build_bipidinet(spec), (1, 3, 224, 224))
    assert abs(r.flops / 0.25e8 - 1) < 0.10
    assert abs(r.bops / 42.74e8 - 1) < 0.10
    assert abs(r.ops / 0.92e8 - 1) < 0.10
