import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jctnet import ops, tfm
from jctnet.config import RunConfig
from jctnet.nn import Module
from jctnet.tensor import Tensor, no_grad


def wrap_class_mask(h, wd, w, shift):
    """Oracle: after rolling by -shift, a token's row/col class records whether it wrapped around."""
    rows = (np.arange(h) + shift) >= h
    cols = (np.arange(wd) + shift) >= wd
    cls = rows[:, None].astype(int) * 2 + cols[None, :].astype(int)
    win = cls.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    return np.where(win[:, :, None] == win[:, None, :], 0.0, ops.MASK_VALUE)


def toy_tfm_cfg(**over):
    cfg = RunConfig.toy()
    for k, v in over.items():
        cfg.set(k, v)
    return cfg.model_config().tfm


def zero_all(module: Module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


# -- layout -------------------------------------------------------------------
def test_patch_partition_row_major():
    x = Tensor(np.arange(2 * 2 * 1.0).reshape(1, 1, 2, 2))
    tokens, grid = tfm.patch_partition(x, 1)
    assert grid == (2, 2) and tokens.shape == (1, 4, 1)
    np.testing.assert_array_equal(tokens.data.reshape(-1), [0, 1, 2, 3])


def test_patch_partition_k2():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)))
    tokens, grid = tfm.patch_partition(x, 2)
    assert tokens.shape == (1, 4, 12) and grid == (2, 2)
    np.testing.assert_array_equal(tfm.patch_unpartition(tokens, grid, 2).data, x.data)


@settings(max_examples=20)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_patch_round_trip(k, gh, gw):
    x = Tensor(np.random.default_rng(k).normal(size=(2, 3, gh * k * 2, gw * k * 2)))
    tokens, grid = tfm.patch_partition(x, k)
    np.testing.assert_array_equal(tfm.patch_unpartition(tokens, grid, k).data, x.data)


def test_window_partition_index_arithmetic():
    grid = np.arange(64.0).reshape(1, 8, 8, 1)
    win = tfm.window_partition(Tensor(grid), 4).data
    assert win.shape == (4, 16, 1)
    assert win[2, 1 * 4 + 2, 0] == 5 * 8 + 2


@settings(max_examples=20)
@given(st.sampled_from([2, 4]), st.integers(1, 4), st.integers(1, 4))
def test_window_round_trip(w, nh, nw):
    x = np.random.default_rng(nh * 10 + nw).normal(size=(2, nh * w, nw * w, 3))
    win = tfm.window_partition(Tensor(x), w)
    np.testing.assert_array_equal(tfm.window_reverse(win, w, nh * w, nw * w).data, x)


def test_single_window_is_full_flatten():
    x = np.random.default_rng(0).normal(size=(1, 4, 4, 2))
    np.testing.assert_array_equal(tfm.window_partition(Tensor(x), 4).data, x.reshape(1, 16, 2))


# -- mask ---------------------------------------------------------------------
@pytest.mark.parametrize("h", [8, 12, 16])
@pytest.mark.parametrize("wd", [8, 12, 16])
def test_mask_matches_wrap_oracle(h, wd):
    np.testing.assert_array_equal(tfm.build_swmsa_mask(h, wd, 4, 2), wrap_class_mask(h, wd, 4, 2))


@settings(max_examples=40)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4]), st.data())
def test_mask_oracle_and_symmetry_small_grids(nh, nw, w, data):
    shift = data.draw(st.integers(0, w - 1))
    mask = tfm.build_swmsa_mask(nh * w, nw * w, w, shift)
    np.testing.assert_array_equal(mask, wrap_class_mask(nh * w, nw * w, w, shift))
    np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))


def test_mask_first_window_single_region_and_zero_shift():
    assert not tfm.build_swmsa_mask(8, 8, 4, 2)[0].any()
    assert not tfm.build_swmsa_mask(16, 12, 4, 0).any()


def test_mask_rejects_shift_at_least_window():
    with pytest.raises(ValueError):
        tfm.build_swmsa_mask(8, 8, 4, 4)


def test_relative_position_index_range():
    idx = tfm.relative_position_index(4)
    assert idx.shape == (16, 16)
    assert idx.min() == 0 and idx.max() == 48
    assert np.all(np.diag(idx) == 24)


# -- attention ------------------------------------------------------------------
def test_zero_qkv_gives_zero_output():
    attn = tfm.WindowAttention(np.random.default_rng(0), 8, 2, 4)
    for p in (attn.qkv.weight, attn.qkv.bias, attn.bias_table, attn.proj.bias):
        p.data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(3, 16, 8)))
    probs = []
    out = attn(x, None, probs)
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_allclose(probs[0], 1.0 / 16)


def test_single_token_window_is_value_projection():
    rng = np.random.default_rng(0)
    attn = tfm.WindowAttention(rng, 6, 2, 1)
    x = Tensor(rng.normal(size=(5, 1, 6)))
    v = ops.linear(x, Tensor(attn.qkv.weight.data[:, 12:]), Tensor(attn.qkv.bias.data[12:]))
    np.testing.assert_allclose(attn(x).data, attn.proj(v).data, atol=1e-12)


def test_masked_groups_do_not_attend():
    rng = np.random.default_rng(2)
    attn = tfm.WindowAttention(rng, 8, 2, 4)
    mask = tfm.build_swmsa_mask(8, 8, 4, 2)
    probs = []
    attn(Tensor(rng.normal(size=(8, 16, 8)) * 3), mask, probs)
    p = probs[0].reshape(2, 4, 2, 16, 16)
    cross = np.broadcast_to((mask != 0)[None, :, None], p.shape)
    assert p[cross].max() < 1e-8


def test_regular_windows_are_local():
    cfg = toy_tfm_cfg()
    layer = tfm.SwinLayer(np.random.default_rng(0), cfg, 2, shifted=False)
    z = np.random.default_rng(1).normal(size=(1, 64, cfg.token_dim))
    base = layer(Tensor(z), (8, 8)).data
    z2 = z.copy()
    z2[0, 0] += np.linspace(-1, 1, cfg.token_dim)  # token (0, 0), window 0; not a constant shift
    changed = np.abs(layer(Tensor(z2), (8, 8)).data - base).max(axis=-1).reshape(8, 8) > 0
    assert changed[:4, :4].all()
    assert not changed[4:, :].any() and not changed[:, 4:].any()


def test_zero_stl_is_identity():
    cfg = toy_tfm_cfg()
    for shifted in (False, True):
        layer = tfm.SwinLayer(np.random.default_rng(0), cfg, 2, shifted)
        zero_all(layer)
        z = np.random.default_rng(1).normal(size=(2, 64, cfg.token_dim))
        np.testing.assert_array_equal(tfm.stl_forward(Tensor(z), (8, 8), layer).data, z)


def test_shift_zero_matches_regular_phase():
    base = toy_tfm_cfg()
    regular = tfm.SwinLayer(np.random.default_rng(0), base, 2, shifted=False)
    shifted = tfm.SwinLayer(np.random.default_rng(0), dataclasses.replace(base, shift_size=0), 2, shifted=True)
    assert shifted.shift == 0
    z = Tensor(np.random.default_rng(1).normal(size=(1, 64, base.token_dim)))
    np.testing.assert_array_equal(regular(z, (8, 8)).data, shifted(z, (8, 8)).data)


def test_mstb_zero_layers_identity_conv_is_identity():
    cfg = toy_tfm_cfg()
    block = tfm.Mstb(np.random.default_rng(0), cfg, 2, 2)
    zero_all(block)
    for conv in block.convs:
        conv.weight.data[:, :, 0, 0] = np.eye(cfg.token_dim)
    z = np.random.default_rng(1).normal(size=(1, 64, cfg.token_dim))
    np.testing.assert_allclose(tfm.mstb_forward(Tensor(z), (8, 8), block).data, z, atol=1e-14)


@pytest.mark.parametrize("depth", [2, 4])
def test_mstb_preserves_shape(depth):
    cfg = toy_tfm_cfg()
    block = tfm.Mstb(np.random.default_rng(0), cfg, depth, 2)
    assert block(Tensor(np.ones((1, 32, cfg.token_dim))), (4, 8)).shape == (1, 32, cfg.token_dim)


def test_mstb_rejects_odd_depth():
    with pytest.raises(ValueError):
        tfm.Mstb(np.random.default_rng(0), toy_tfm_cfg(), 3, 2)


# -- TFM ------------------------------------------------------------------------
def test_zero_branch_identity():
    cfg = toy_tfm_cfg()
    model = tfm.build_tfm(cfg, 64, seed=0)
    for block in model.blocks:
        zero_all(block)
        for conv in block.convs:
            conv.weight.data[:, :, 0, 0] = np.eye(cfg.embed_dim)
    c_f = Tensor(np.random.default_rng(1).normal(size=(2, 64, 8, 8)))
    np.testing.assert_allclose(model(c_f).data, 2 * model.channel_reduce(c_f).data, atol=1e-12)


def test_tfm_preserves_resolution():
    model = tfm.build_tfm(toy_tfm_cfg(), 64, seed=0)
    assert model(Tensor(np.ones((1, 64, 12, 8)))).shape == (1, 32, 12, 8)


def test_tfm_rejects_channel_mismatch_and_bad_grid():
    model = tfm.build_tfm(toy_tfm_cfg(), 64, seed=0)
    with pytest.raises(ValueError):
        model(Tensor(np.ones((1, 32, 8, 8))))
    with pytest.raises(ValueError):
        model(Tensor(np.ones((1, 64, 6, 8))))


def test_two_blocks_give_global_context():
    model = tfm.build_tfm(toy_tfm_cfg(), 64, seed=0)
    x = np.random.default_rng(1).normal(size=(1, 64, 8, 8))
    with no_grad():
        base = model(Tensor(x)).data
        x[0, :, 6, 1] += np.linspace(-1, 1, 64)
        moved = model(Tensor(x)).data
    assert (np.abs(moved - base).max(axis=1) > 0).all()


def test_config_validation():
    with pytest.raises(ValueError):
        tfm.TfmConfig(depths=(3,), num_heads=(2,))
    with pytest.raises(ValueError):
        tfm.TfmConfig(embed_dim=30, depths=(2,), num_heads=(4,))
    assert tfm.TfmConfig().shift_size == 2
    assert tfm.TfmConfig(patch_size=2, embed_dim=8, depths=(2,), num_heads=(2,)).token_dim == 32
