import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from titanet import layers as L
from titanet.encoder import (REPORTED_PARAM_COUNTS, PRESETS, EncoderConfig, build_encoder,
                             count_encoder_parameters, encoder_forward, encoder_parameter_breakdown,
                             preset)
from titanet.errors import ConfigError, ShapeError
from titanet.layers import Mode, Tensor


def small(**kw):
    base = dict(channels=8, epilogue_channels=16)
    base.update(kw)
    return preset("toy", **base)


def test_s_m_l_presets_layout():
    L_ = PRESETS["titanet_l"]
    assert (L_.mega_blocks, L_.repeats, L_.channels, L_.mega_kernels) == (3, 3, 1024, (7, 11, 15))
    assert (L_.prologue_kernel, L_.epilogue_kernel, L_.epilogue_channels) == (3, 1, 1536)
    S = PRESETS["titanet_s"]
    assert S.channels == 256 and S.mega_kernels == (7, 11, 15) and S.repeats == 3
    assert PRESETS["titanet_m"].channels == 512
    assert REPORTED_PARAM_COUNTS == {"titanet_s": 6.4e6, "titanet_m": 13.4e6, "titanet_l": 25.3e6}


def test_toy_with_narrow_epilogue_shape():
    enc = build_encoder(small(), seed=0)
    x = np.random.default_rng(0).normal(size=(1, 10, 80))
    assert encoder_forward(enc, x, Mode.EVAL).shape == (1, 16, 10)


def test_length_preserved_for_different_inputs():
    enc = build_encoder(small(mega_blocks=2, repeats=2), seed=1)
    rng = np.random.default_rng(1)
    for T in (100, 250):
        assert encoder_forward(enc, rng.normal(size=(2, T, 80))).shape == (2, 16, T)


def test_eval_forward_bit_identical():
    enc = build_encoder(small(), seed=2)
    x = np.random.default_rng(2).normal(size=(2, 30, 80))
    a = encoder_forward(enc, x, Mode.EVAL).data
    b = encoder_forward(enc, x, Mode.EVAL).data
    assert a.tobytes() == b.tobytes()


def test_zero_input_finite():
    enc = build_encoder(small(), seed=3)
    out = encoder_forward(enc, np.zeros((1, 20, 80)), Mode.EVAL).data
    assert np.all(np.isfinite(out))
    assert np.any(out != 0)


def test_wrong_feature_dim_rejected():
    enc = build_encoder(small(), seed=0)
    with pytest.raises(ShapeError, match="80"):
        encoder_forward(enc, np.zeros((1, 10, 40)))


@pytest.mark.parametrize("bad", [
    dict(mega_kernels=(6,)), dict(mega_blocks=2, mega_kernels=(7,)), dict(se_reduction=3),
    dict(prologue_kernel=5), dict(epilogue_kernel=3), dict(dropout=1.0),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        preset("toy", **bad)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="titanet_s"):
        preset("titanet_xl")


def test_residual_identity_with_open_gate_and_zero_convs():
    cfg = small(mega_blocks=2, repeats=2, mega_kernels=(3, 5))
    enc = build_encoder(cfg, seed=4)
    x = Tensor(np.abs(np.random.default_rng(4).normal(size=(2, 8, 12))))  # block inputs follow a relu
    for block in enc.blocks:
        for sub in block.subs:
            sub.dw.data[:] = 0
            sub.pw.data[:] = 0
            sub.pw_bias.data[:] = 0
        block.se_w2.data[:] = 0
        block.se_b2.data[:] = 50.0
        for mode in (Mode.TRAIN, Mode.EVAL):
            out = block(x, mode, 0.1, np.random.default_rng(0))
            np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_gradient_reaches_every_encoder_parameter():
    # C=32 gives the SE bottleneck 4 units, so one dead relu cannot zero fc1 outright
    enc = build_encoder(small(channels=32, mega_blocks=2, repeats=2, mega_kernels=(3, 5)), seed=5)
    rng = np.random.default_rng(5)
    out = encoder_forward(enc, rng.normal(size=(3, 15, 80)), Mode.TRAIN)
    L.sum(L.mul(out, Tensor(rng.normal(size=out.shape)))).backward()
    for p in enc.parameters():
        assert p.grad is not None and np.any(p.grad != 0), p.name


def test_parameter_names_unique():
    names = [p.name for p in build_encoder(small(mega_blocks=3, repeats=2), 0).parameters()]
    assert len(names) == len(set(names))
    assert "encoder.block1.sub1.dw.weight" in names


def test_toy_hand_count():
    # B=1, R=1, C=8, k=7, E=16, r=8
    C, E, k, h = 8, 16, 7, 1
    prologue = C * 80 * 3 + 2 * C
    sub = C * k + C * C + C + 2 * C
    se = h * C + h + C * h + C
    epilogue = E * C + E + 2 * E
    enc = build_encoder(small(), 0)
    assert count_encoder_parameters(enc) == prologue + sub + se + epilogue == 2281


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_breakdown_matches_built_encoder(name):
    cfg = PRESETS[name] if name == "toy" else preset(name, channels=PRESETS[name].channels // 16)
    enc = build_encoder(cfg, 0)
    assert sum(encoder_parameter_breakdown(cfg).values()) == count_encoder_parameters(enc)


def test_doubling_channels_roughly_quadruples_block_convs():
    def conv_count(C):
        enc = build_encoder(preset("toy", channels=C, mega_blocks=3, repeats=2), 0)
        return sum(p.data.size for b in enc.blocks for s in b.subs for p in (s.dw, s.pw))
    ratio = conv_count(128) / conv_count(64)
    assert 3.7 < ratio < 4.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2**31))
def test_count_independent_of_seed(s1, s2):
    cfg = small(mega_blocks=2, repeats=2)
    assert count_encoder_parameters(build_encoder(cfg, s1)) == count_encoder_parameters(build_encoder(cfg, s2))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3))
def test_time_length_preserved_property(T, B):
    enc = build_encoder(small(), 0)
    x = np.random.default_rng(T).normal(size=(B, T, 80))
    assert encoder_forward(enc, x, Mode.EVAL).shape == (B, 16, T)
