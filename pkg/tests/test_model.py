import hashlib
import time
from fractions import Fraction

import numpy as np
import pytest

from jctnet import cfm, crm, tfm
from jctnet.config import RunConfig
from jctnet.model import (
    ModelConfig,
    build_model,
    closed_form_parameter_count,
    count_parameters,
    parameter_digest,
)
from jctnet.tensor import Tensor, no_grad

# Recorded once from the deterministic build (seeded init, float64, values rounded to 1e-9).
GOLDEN_PARAMS = "91d82f5a6df263af8f8db08610650c0338e59e0538eed578e588221989d157b9"
GOLDEN_CFM = "53681270cc41bd2fa2856abc53bb80dbaa2617c9af9b86715aabddff76f71ded"
GOLDEN_MSTB = "5f76a9f2105642dc6aabe71f1ec3bb813b9e602f962285fcd746eeac24bcd088"


def digest(a):
    return hashlib.sha256(np.round(a, 9).astype("<f8").tobytes()).hexdigest()


def full_config(embed_dim=256, depth=8) -> ModelConfig:
    cfg = RunConfig()
    cfg.set("tfm.embed_dim", str(embed_dim))
    cfg.set("tfm.depths", ",".join([str(depth)] * 4))
    return cfg.model_config()


# -- CFM ------------------------------------------------------------------------
def test_cfm_full_scale_conv_weight_count():
    assert cfm.conv_weight_count(cfm.CfmConfig()) == 7_632_576


def test_cfm_all_ones_schedule():
    c = cfm.CfmConfig(channel_scale=Fraction(1, 1024))
    assert c.widths == (1,) * 10
    model = cfm.build_cfm(c, 0)
    assert model.convs[0].weight.size == 27
    assert all(conv.weight.size == 9 for conv in model.convs[1:])


def test_cfm_config_validation():
    with pytest.raises(ValueError):
        cfm.CfmConfig(channel_schedule=(8,) * 9)
    with pytest.raises(ValueError):
        cfm.CfmConfig(pool_positions=(2, 4))
    with pytest.raises(ValueError):
        cfm.CfmConfig(channel_scale=0)


def test_cfm_full_scale_width_output_shape():
    model = cfm.build_cfm(cfm.CfmConfig(), 0)
    with no_grad():
        out = model(Tensor(np.zeros((1, 3, 64, 64))))
    assert out.shape == (1, 512, 8, 8)


def test_cfm_zero_image_eval_gives_zero():
    model = cfm.build_cfm(cfm.CfmConfig(channel_scale=Fraction(1, 8)), 0)
    model.eval()
    with no_grad():
        assert not model(Tensor(np.zeros((1, 3, 32, 32)))).data.any()


def test_cfm_rejects_indivisible_input():
    model = cfm.build_cfm(cfm.CfmConfig(channel_scale=Fraction(1, 8)), 0)
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 3, 36, 32))))


def test_cfm_seeded_build_is_bit_identical():
    a = cfm.build_cfm(cfm.CfmConfig(channel_scale=Fraction(1, 8)), 3)
    b = cfm.build_cfm(cfm.CfmConfig(channel_scale=Fraction(1, 8)), 3)
    assert parameter_digest(a) == parameter_digest(b)


def test_standardize_layout():
    px = np.zeros((2, 4, 5, 3), dtype=np.uint8)
    px[..., 1] = 255
    x = cfm.standardize(px)
    assert x.shape == (2, 3, 4, 5)
    np.testing.assert_array_equal(x[:, 0], -2.0)
    np.testing.assert_array_equal(x[:, 1], 2.0)


# -- CRM ------------------------------------------------------------------------
def test_crm_full_scale_weight_count():
    head = crm.build_crm(256, 0)
    weights = sum(p.size for n, p in head.named_parameters() if n.endswith("weight") and n.startswith("conv"))
    assert weights == 368_704


def test_crm_preserves_extent():
    head = crm.build_crm(256, 0)
    with no_grad():
        assert head(Tensor(np.zeros((1, 256, 32, 32)))).shape == (1, 1, 32, 32)


@pytest.mark.parametrize(
    "values, expected",
    [(np.zeros((1, 1, 3, 3)), 0.0), (np.array([[[[5.0]]]]), 5.0), (np.array([1.0, -1.0, 2.0, 3.0]).reshape(1, 1, 2, 2), 5.0)],
)
def test_count_from_map(values, expected):
    assert crm.count_from_map(Tensor(values)).data.tolist() == [expected]


def test_count_from_map_mean_and_bad_reduction():
    m = Tensor(np.array([1.0, -1.0, 2.0, 3.0]).reshape(1, 1, 2, 2))
    assert crm.count_from_map(m, "mean").item() == 1.25
    with pytest.raises(ValueError):
        crm.count_from_map(m, "max")


# -- assembled model ------------------------------------------------------------
def test_toy_forward_shape_and_speed(toy_cfg):
    model = build_model(toy_cfg.model_config(), 0)
    images = model.images_to_tensor(np.random.default_rng(0).integers(0, 256, (1, 64, 64, 3)))
    t0 = time.perf_counter()
    with no_grad():
        out = model(images)
    assert time.perf_counter() - t0 < 5.0
    assert out.shape == (1, 1, 8, 8)


@pytest.mark.parametrize("h, w", [(32, 32), (64, 96), (96, 32)])
def test_shape_law(toy_cfg, h, w):
    model = build_model(toy_cfg.model_config(), 0)
    with no_grad():
        st = model.stages(Tensor(np.zeros((2, 3, h, w))))
    assert st["cfm"].shape == (2, 64, h // 8, w // 8)
    assert st["tfm"].shape == (2, 32, h // 8, w // 8)
    assert st["crm"].shape == (2, 1, h // 8, w // 8)


def test_same_seed_same_parameters(toy_cfg):
    a = build_model(toy_cfg.model_config(), 0)
    assert parameter_digest(a) == parameter_digest(build_model(toy_cfg.model_config(), 0))
    assert parameter_digest(a) != parameter_digest(build_model(toy_cfg.model_config(), 1))


def test_golden_digests(toy_cfg):
    model = build_model(toy_cfg.model_config(), 0)
    assert parameter_digest(model) == GOLDEN_PARAMS
    model.eval()
    img = np.random.default_rng(7).integers(0, 256, (1, 64, 64, 3))
    with no_grad():
        assert digest(model.cfm(model.images_to_tensor(img)).data) == GOLDEN_CFM
    block = tfm.Mstb(np.random.default_rng(0), toy_cfg.model_config().tfm, 2, 2)
    with no_grad():
        out = block(Tensor(np.random.default_rng(1).normal(size=(1, 64, 32))), (8, 8))
    assert digest(out.data) == GOLDEN_MSTB


def test_toy_count_matches_closed_form(toy_cfg):
    mcfg = toy_cfg.model_config()
    counts = count_parameters(build_model(mcfg, 0))
    assert counts == closed_form_parameter_count(mcfg)
    assert counts == {"cfm": 120_456, "tfm": 55_144, "crm": 5_841, "total": 181_441}


@pytest.mark.parametrize("embed_dim, depth", [(64, 8), (128, 8), (256, 2), (256, 4), (256, 8)])
def test_closed_form_matches_enumeration_at_full_scale_widths(embed_dim, depth):
    mcfg = full_config(embed_dim, depth)
    assert count_parameters(build_model(mcfg, 0)) == closed_form_parameter_count(mcfg)


def test_full_config_total_in_range():
    total = closed_form_parameter_count(full_config())["total"]
    assert 24_000_000 <= total <= 33_000_000
