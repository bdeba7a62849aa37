import io
import json

import numpy as np
import pytest

from ssvd import backbone, sampling
from ssvd import kernels as K
from ssvd.errors import ConfigurationError


def _feat(h, w, c=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(1, c, h, w)).astype(np.float32)


def test_offset_channel_count():
    assert sampling.OFFSET_CHANNELS == 72


def test_predictor_output_channels_on_even_and_odd_grids():
    w = sampling.init_offset_predictor(seed=0, channels=8, zero_final=False)
    for h_, w_ in ((8, 8), (7, 7), (14, 10)):
        off = sampling.predict_offsets(_feat(h_, w_, seed=1), _feat(h_, w_, seed=2), w)
        assert off.shape == (1, 72, h_, w_)
        assert np.isfinite(off).all()


def test_predictor_deterministic():
    a = sampling.init_offset_predictor(seed=5, channels=8, zero_final=False)
    b = sampling.init_offset_predictor(seed=5, channels=8, zero_final=False)
    r, s = _feat(8, 8, seed=3), _feat(8, 8, seed=4)
    assert np.array_equal(sampling.predict_offsets(r, s, a),
                          sampling.predict_offsets(r, s, b))


def test_zero_final_predictor_gives_zero_offsets():
    w = sampling.init_offset_predictor(seed=0, channels=8)
    off = sampling.predict_offsets(_feat(8, 8, seed=1), _feat(8, 8, seed=2), w)
    assert np.array_equal(off, np.zeros_like(off))


def test_identity_sampler_with_zero_offsets_is_identity():
    sampler = sampling.init_sampler(channels=8)
    feat = _feat(6, 6, c=8, seed=7)
    out = sampling.hallucinate(feat, np.zeros((1, 72, 6, 6), np.float32), sampler)
    assert np.allclose(out, feat, atol=1e-6)


def test_hallucinate_with_shift_offsets_shifts_features():
    sampler = sampling.init_sampler(channels=8)
    feat = _feat(6, 6, c=8, seed=8)
    off = np.zeros((1, 72, 6, 6), np.float32)
    off[0, 1::2] = 1.0  # dx = +1 for every tap and group
    out = sampling.hallucinate(feat, off, sampler)
    assert np.allclose(out[0, :, :, :-1], feat[0, :, :, 1:], atol=1e-6)


def test_oracle_offsets_broadcast_and_clamp():
    flow = np.zeros((1, 2, 4, 4), np.float32)
    flow[0, 0] = 3.0   # dx
    flow[0, 1] = -4.0  # dy, magnitude 5
    off = sampling.oracle_offsets(flow, clamp_radius=2.5)
    assert off.shape == (1, 72, 4, 4)
    # clamped to half magnitude: (1.5, -2)
    assert np.allclose(off[0, 0::2], -2.0)  # dy channels
    assert np.allclose(off[0, 1::2], 1.5)   # dx channels
    off2 = sampling.oracle_offsets(flow, clamp_radius=100.0)
    assert np.allclose(off2[0, 1::2], 3.0) and np.allclose(off2[0, 0::2], -4.0)


def test_hallucinate_rejects_wrong_offset_channels():
    sampler = sampling.init_sampler(channels=8)
    with pytest.raises(ConfigurationError, match="72"):
        sampling.hallucinate(_feat(6, 6), np.zeros((1, 18, 6, 6), np.float32), sampler)


def test_aggregate_sampling_mean():
    a = backbone.FeaturePyramid({4: np.full((1, 2, 3, 3), 2.0, np.float32)})
    b = backbone.FeaturePyramid({4: np.full((1, 2, 3, 3), 4.0, np.float32)})
    assert np.all(sampling.aggregate_sampling([a, b])[4] == 3.0)


def test_sampling_locations_shape_and_values():
    sampler = sampling.init_sampler(channels=8)
    off = np.zeros((1, 72, 5, 5), np.float32)
    off[0, 0] = 0.25  # group 0, tap (0, 0), dy
    locs = sampling.sampling_locations(off, sampler)
    assert locs.shape == (4, 9, 5, 5, 2)
    # tap (0, 0) base position for output (0, 0) with pad 1 is (-1, -1)
    assert locs[0, 0, 0, 0, 0] == -1.0          # x
    assert locs[0, 0, 0, 0, 1] == -1.0 + 0.25   # y offset applied
    # other groups unaffected
    assert locs[1, 0, 0, 0, 1] == -1.0


def test_sampling_locations_jsonl():
    sampler = sampling.init_sampler(channels=8)
    off = np.zeros((1, 72, 2, 2), np.float32)
    buf = io.StringIO()
    n = sampling.write_sampling_locations_jsonl(buf, 3, off, sampler)
    lines = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert n == len(lines) == 4 * 9 * 2 * 2
    first = lines[0]
    assert first["level"] == 3
    assert set(first) >= {"level", "group", "tap", "y", "x", "sx", "sy"}


def test_deform_matches_plain_conv_when_offsets_zero():
    # the sampling stream with zero offsets is numerically a plain 3x3 conv
    rng = np.random.default_rng(11)
    sampler = sampling.init_sampler(channels=8, seed=11)
    feat = _feat(9, 7, c=8, seed=12)
    out_deform = sampling.hallucinate(feat, np.zeros((1, 72, 9, 7), np.float32), sampler)
    out_conv = K.conv2d(feat, sampler)
    assert np.array_equal(out_deform, out_conv)
