import numpy as np
import pytest

from ssvd import backbone
from ssvd.errors import DimensionError


def _frame(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(1, 3, h, w)).astype(np.float32)


def test_level_sizes_448():
    sizes = backbone.level_sizes(448, 448)
    assert sizes == {3: (56, 56), 4: (28, 28), 5: (14, 14), 6: (7, 7)}


def test_level_sizes_64():
    assert backbone.level_sizes(64, 64) == {3: (8, 8), 4: (4, 4), 5: (2, 2), 6: (1, 1)}


def test_level_sizes_rectangular():
    assert backbone.level_sizes(128, 192) == {
        3: (16, 24), 4: (8, 12), 5: (4, 6), 6: (2, 3)}


def test_pyramid_shapes_and_strides():
    w = backbone.init_backbone_weights(seed=3)
    pyr = backbone.extract_pyramid(_frame(128, 64), w)
    assert sorted(pyr) == [3, 4, 5, 6]
    for lv in pyr:
        feat = pyr[lv]
        s = backbone.FeaturePyramid.stride(lv)
        assert s == 2 ** lv
        assert feat.shape == (1, 32, 128 // s, 64 // s)
        assert feat.dtype == np.float32
        assert np.isfinite(feat).all()


def test_pyramid_channels_configurable():
    cfg = backbone.BackboneConfig(channels=16)
    w = backbone.init_backbone_weights(seed=3, config=cfg)
    pyr = backbone.extract_pyramid(_frame(64, 64), w)
    assert pyr.channels == 16
    assert pyr[6].shape == (1, 16, 1, 1)


def test_input_must_be_divisible_by_64():
    w = backbone.init_backbone_weights(seed=0)
    with pytest.raises(DimensionError, match="64"):
        backbone.extract_pyramid(_frame(96, 64), w)


def test_deterministic_weights_and_features():
    f = _frame(64, 64, seed=9)
    a = backbone.extract_pyramid(f, backbone.init_backbone_weights(seed=11))
    b = backbone.extract_pyramid(f, backbone.init_backbone_weights(seed=11))
    c = backbone.extract_pyramid(f, backbone.init_backbone_weights(seed=12))
    for lv in a:
        assert np.array_equal(a[lv], b[lv])
    assert any(not np.array_equal(a[lv], c[lv]) for lv in a)


def test_dual_pyramids_differ_between_streams():
    f = _frame(64, 64, seed=4)
    wm = backbone.init_backbone_weights(seed=1)
    ws = backbone.init_backbone_weights(seed=2)
    pm, ps = backbone.dual_pyramids(f, wm, ws)
    assert any(not np.array_equal(pm[lv], ps[lv]) for lv in pm)


def test_features_respond_to_input():
    w = backbone.init_backbone_weights(seed=5)
    a = backbone.extract_pyramid(_frame(64, 64, seed=1), w)
    b = backbone.extract_pyramid(_frame(64, 64, seed=2), w)
    assert any(not np.array_equal(a[lv], b[lv]) for lv in a)


def test_weights_roundtrip(tmp_path):
    w = backbone.init_backbone_weights(seed=7)
    path = tmp_path / "bb.wgts"
    backbone.save_backbone(path, w)
    loaded = backbone.load_backbone(path)
    f = _frame(64, 64, seed=3)
    a = backbone.extract_pyramid(f, w)
    b = backbone.extract_pyramid(f, loaded)
    for lv in a:
        assert np.array_equal(a[lv], b[lv])


def test_weights_corruption_detected(tmp_path):
    w = backbone.init_backbone_weights(seed=7)
    path = tmp_path / "bb.wgts"
    backbone.save_backbone(path, w)
    blob = bytearray(path.read_bytes())
    blob[7] ^= 0xFF  # flip a byte inside the manifest length / header
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="corrupt"):
        backbone.load_backbone(path)


def test_weights_truncation_detected(tmp_path):
    w = backbone.init_backbone_weights(seed=7)
    path = tmp_path / "bb.wgts"
    backbone.save_backbone(path, w)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError, match="corrupt"):
        backbone.load_backbone(path)


def test_generic_weight_store_roundtrip(tmp_path):
    convs = {"a": backbone.ortho_conv(np.random.default_rng(0), 4, 3, 3),
             "b": backbone.ortho_conv(np.random.default_rng(1), 2, 4, 1, stride=2)}
    extras = {"note": [1, 2, 3]}
    path = tmp_path / "w.wgts"
    backbone.save_weights(path, convs, extras)
    convs2, extras2 = backbone.load_weights(path)
    assert extras2["note"] == [1, 2, 3]
    assert set(convs2) == {"a", "b"}
    for k in convs:
        assert np.array_equal(convs[k].kernel, convs2[k].kernel)
        assert np.array_equal(convs[k].bias, convs2[k].bias)
        assert convs[k].stride == convs2[k].stride
