import math

import numpy as np
import pytest

from prnface import backbone as bb
from prnface.backbone import BackboneConfig
from prnface.numerics import nn
from prnface.numerics.nn import ParamStore
from prnface.numerics.tensor import Tensor


def small_cfg(**kw):
    base = dict(input_side=32, stem_channels=4, stage_widths=(4, 8), blocks=(1, 1), strides=(1, 2), bottleneck_divisor=2)
    base.update(kw)
    return BackboneConfig(**base)


def hand_sides(cfg):
    sides = [cfg.input_side, math.ceil(cfg.input_side / 2)]
    for s in cfg.strides:
        sides.append(math.ceil(sides[-1] / s))
    return sides


def test_full_scale_sides():
    cfg = BackboneConfig.full_scale()
    assert cfg.input_side == 140
    assert cfg.output_sides == [140, 70, 70, 35, 18, 9]
    assert cfg.map_side == 9 and cfg.channels == 2048


@pytest.mark.parametrize("side, strides", [(64, (1, 2, 2)), (32, (1, 2)), (40, (2, 2, 2)), (17, (1, 2))])
def test_desk_sides_match_stride_arithmetic(side, strides):
    cfg = small_cfg(input_side=side, stage_widths=(4,) * len(strides), blocks=(1,) * len(strides), strides=strides)
    assert cfg.output_sides == hand_sides(cfg)
    store = ParamStore(np.float32, seed=0)
    bb.build(store, cfg)
    maps, fg = bb.backbone_forward(np.zeros((2, side, side, 3)), store, cfg, nn.EVAL)
    assert maps.shape == (2, cfg.map_side, cfg.map_side, cfg.channels)
    assert fg.shape == (2, cfg.channels)


def test_default_desk_map():
    cfg = BackboneConfig()
    assert cfg.output_sides == [64, 32, 32, 16, 8]
    assert cfg.channels == 64


def test_global_pool_of_constant_channel():
    maps = np.zeros((1, 5, 5, 3))
    maps[..., 1] = 2.5
    fg = bb.global_average_pool(Tensor(maps)).data
    np.testing.assert_allclose(fg, [[0.0, 2.5, 0.0]])


def test_wrong_input_side_rejected():
    cfg = small_cfg()
    store = ParamStore(np.float32)
    bb.build(store, cfg)
    with pytest.raises(ValueError):
        bb.backbone_forward(np.zeros((1, 30, 30, 3)), store, cfg, nn.EVAL)


def test_parameters_live_under_backbone_namespace():
    store = ParamStore(np.float32)
    bb.build(store, small_cfg(), n_classes=5)
    assert all(n.startswith("backbone.") for n in store)
    assert store["backbone.head.w"].shape == (8, 5)


def test_one_hot_cell_patch():
    maps = np.zeros((1, 9, 9, 4))
    maps[0, 4, 4] = [1.0, 2.0, 3.0, 4.0]
    lms = np.array([[[70.0, 70.0], [0.0, 0.0], [70.0, 70.0]]])
    p = bb.extract_patches(Tensor(maps), lms, 140, 8)
    assert p.extent == 1
    assert p.n_patches == 3
    np.testing.assert_array_equal(p.vectors.data[0, 0], [1, 2, 3, 4])
    np.testing.assert_array_equal(p.vectors.data[0, 1], 0)
    np.testing.assert_array_equal(p.vectors.data[0, 0], p.vectors.data[0, 2])


def test_patches_follow_landmark_order():
    rng = np.random.default_rng(0)
    maps = rng.normal(size=(2, 8, 8, 3))
    lms = rng.uniform(0, 64, (2, 15, 2))
    p = bb.extract_patches(Tensor(maps), lms, 64, 8)
    assert p.vectors.shape == (2, 15, 3)
    for b in range(2):
        for i in range(15):
            col, row = (lms[b, i] * 8 / 64).astype(int)
            np.testing.assert_array_equal(p.vectors.data[b, i], maps[b, row, col])


def test_wide_patch_block_stays_inside_map():
    rng = np.random.default_rng(1)
    maps = rng.normal(size=(1, 8, 8, 2))
    lms = np.array([[[0.0, 0.0], [63.9, 63.9], [30.0, 30.0]]])
    p = bb.extract_patches(Tensor(maps), lms, 64, 24)  # extent 3
    assert p.extent == 3
    v = p.vectors.data.reshape(1, 3, 3, 3, 2)
    np.testing.assert_array_equal(v[0, 0], maps[0, 0:3, 0:3])
    np.testing.assert_array_equal(v[0, 1], maps[0, 5:8, 5:8])
    np.testing.assert_array_equal(v[0, 2], maps[0, 2:5, 2:5])


def test_backbone_gradient_in_double_precision():
    from prnface.numerics.gradcheck import grad_check

    cfg = small_cfg(input_side=8, stem_channels=3, stage_widths=(4,), blocks=(1,), strides=(2,))
    store = ParamStore(np.float64, seed=1)
    bb.build(store, cfg, n_classes=3)
    x = np.random.default_rng(1).uniform(size=(4, 8, 8, 3))

    def f():
        _, fg = bb.backbone_forward(x, store, cfg, nn.TRAIN)
        return nn.softmax_cross_entropy(bb.classify(store, fg), [0, 1, 2, 0])

    assert grad_check(f, store).max_rel_error < 1e-5
