import json

import numpy as np
import pytest

from ssvd import imaging, synth
from ssvd.errors import ConfigurationError
from ssvd.kernels import warp


def _erode(mask, it=2):
    for _ in range(it):
        mask = (mask & np.roll(mask, 1, 0) & np.roll(mask, -1, 0)
                & np.roll(mask, 1, 1) & np.roll(mask, -1, 1))
    return mask


def _single(shape="disc", cls=1, vel=(2.6, -1.3), size=28.0, frames=6, seed=7):
    return synth.SceneSpec(
        "one", seed, (128, 128), frames,
        [synth.ObjectSpec(shape, cls, size, (64.0, 64.0), vel, cls)],
        background_seed=3)


def test_render_deterministic():
    spec = synth.scenario_suite("clean", count=1, seed=5)[0]
    a, _ = synth.render_scene(spec)
    b, _ = synth.render_scene(spec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_suites_are_distinct_and_seeded():
    a = synth.scenario_suite("clean", count=2, seed=1)
    b = synth.scenario_suite("clean", count=2, seed=1)
    c = synth.scenario_suite("clean", count=2, seed=2)
    assert a[0].to_dict() == b[0].to_dict()
    assert a[0].to_dict() != c[0].to_dict()
    assert a[0].to_dict() != a[1].to_dict()


def test_unknown_suite_rejected():
    with pytest.raises(ConfigurationError, match="unknown suite"):
        synth.scenario_suite("foggy", count=1, seed=0)


def test_frame_format():
    frames, _ = synth.render_scene(_single())
    f = frames[0]
    assert f.shape == (1, 3, 128, 128) and f.dtype == np.float32
    assert f.min() >= 0.0 and f.max() <= 1.0


def test_mask_inside_box_and_box_tight():
    for shape, cls in (("disc", 1), ("rectangle", 2), ("triangle", 3)):
        spec = _single(shape, cls)
        for t in (0, 3):
            mask = synth.object_mask(spec.objects[0], t, spec.hw)
            box = synth.object_box(spec.objects[0], t)
            ys, xs = np.nonzero(mask)
            assert xs.min() >= box[0] - 1e-9 and xs.max() <= box[2] + 1e-9
            assert ys.min() >= box[1] - 1e-9 and ys.max() <= box[3] + 1e-9
            # tight: box exceeds the mask bounding box by at most ~1 px per
            # side (integer pixel centers; triangle base rows quantize too)
            x_slack = 3.0 if shape == "triangle" else 2.0
            assert xs.max() - xs.min() >= (box[2] - box[0]) - x_slack
            assert ys.max() - ys.min() >= (box[3] - box[1]) - 2.0


def test_changed_pixels_stay_inside_boxes():
    spec = _single("rectangle", 2, vel=(1.5, 2.0))
    bare = synth.SceneSpec(spec.name, spec.seed, spec.hw, spec.frames, [],
                           background_seed=spec.background_seed)
    frames, truth = synth.render_scene(spec)
    empty, _ = synth.render_scene(bare)
    for t in (0, 2, 5):
        diff = np.abs(frames[t] - empty[t]).max(axis=1)[0] > 1e-6
        ys, xs = np.nonzero(diff)
        (track, cls, box), = truth.boxes_by_frame[t]
        assert xs.min() >= np.floor(box[0]) and xs.max() <= np.ceil(box[2])
        assert ys.min() >= np.floor(box[1]) and ys.max() <= np.ceil(box[3])


def test_warp_by_true_flow_reproduces_interiors():
    for shape, cls, vel in (("disc", 1, (2.6, -1.3)), ("rectangle", 2, (1.7, 2.2)),
                            ("triangle", 3, (-2.45, 0.85))):
        spec = _single(shape, cls, vel)
        frames, truth = synth.render_scene(spec)
        for t, tau in ((2, 1), (2, 2), (3, -2)):
            flow = synth.truth_flow_full(truth, t, tau)
            warped = warp(frames[t + tau], flow)
            interior = _erode(synth.object_mask(spec.objects[0], t, spec.hw), 2)
            err = np.abs(warped[0] - frames[t][0])[:, interior]
            assert err.max() < 0.05, (shape, t, tau, float(err.max()))


def test_occluder_covers_requested_fraction():
    spec = _single("disc", 1, vel=(1.0, 0.5))
    spec.occluder = synth.OccluderSpec(width_frac=0.5, start_frame=1, duration=3,
                                       texture_seed=42)
    occ1 = synth.occluder_mask(spec, 1)
    occ0 = synth.occluder_mask(spec, 0)
    occ4 = synth.occluder_mask(spec, 4)
    assert not occ0.any() and not occ4.any() and occ1.any()
    mask = synth.object_mask(spec.objects[0], 2, spec.hw)
    occ2 = synth.occluder_mask(spec, 2)
    covered = (mask & occ2).sum() / mask.sum()
    assert 0.3 < covered < 0.7  # bar width 50% of the box


def test_occluder_rides_the_object():
    spec = _single("disc", 1, vel=(3.0, 0.0))
    spec.occluder = synth.OccluderSpec(0.4, 0, 6, texture_seed=1)
    c1 = synth.occluder_mask(spec, 1)[64]
    c4 = synth.occluder_mask(spec, 4)[64]
    # bar centre tracks the object: 3 px/frame * 3 frames = 9 px shift
    assert abs(int(np.nonzero(c4)[0].mean()) - int(np.nonzero(c1)[0].mean()) - 9) <= 1


def test_blur_kernel_properties():
    k = synth.line_blur_kernel(9, 0.3)
    assert k.shape == (9, 9)
    assert np.isclose(k.sum(), 1.0)
    assert (k >= 0).all()
    with pytest.raises(ConfigurationError):
        synth.line_blur_kernel(8, 0.0)


def test_blur_only_on_listed_frames():
    spec = _single("disc", 1)
    spec.blur_frames = (2,)
    spec.blur_length = 13
    spec.blur_angle = 0.4
    frames, _ = synth.render_scene(spec)
    plain = synth.SceneSpec(**{**spec.__dict__, "blur_frames": ()})
    frames_plain, _ = synth.render_scene(plain)
    assert np.array_equal(frames[1], frames_plain[1])
    assert not np.array_equal(frames[2], frames_plain[2])
    # blur shrinks image gradients
    g = np.abs(np.diff(frames[2][0, 0], axis=1)).mean()
    gp = np.abs(np.diff(frames_plain[2][0, 0], axis=1)).mean()
    assert g < gp


def test_truth_matches_visibility():
    # object walks off the right edge; truth rows stop when it leaves
    spec = synth.SceneSpec(
        "exit", 3, (64, 64), 10,
        [synth.ObjectSpec("disc", 1, 20.0, (50.0, 32.0), (6.0, 0.0), 1)],
        background_seed=1)
    _, truth = synth.render_scene(spec)
    assert len(truth.boxes_by_frame[0]) == 1
    assert len(truth.boxes_by_frame[9]) == 0
    counts = [len(truth.boxes_by_frame[t]) for t in range(10)]
    assert counts == sorted(counts, reverse=True)  # monotone exit


def test_suite_properties():
    for kind in synth.SUITE_KINDS:
        specs = synth.scenario_suite(kind, count=20, seed=3)
        assert len(specs) == 20
        for s in specs:
            assert len(s.objects) >= 1
            classes = [o.class_id for o in s.objects]
            assert len(set(classes)) == len(classes)
            if kind == "blur":
                assert s.blur_length in (17, 21, 25, 29) and s.blur_frames
                assert 0.3 <= len(s.blur_frames) / s.frames <= 0.7
            elif kind == "occlusion":
                assert s.occluder is not None
                assert 0.3 <= s.occluder.width_frac <= 0.6
                assert 3 <= s.occluder.duration <= 8
            elif kind == "fast":
                assert s.hw == (192, 192)
                speed = np.hypot(*s.objects[0].velocity)
                assert 24.0 <= speed <= 49.0
            elif kind == "clean":
                assert s.occluder is None and not s.blur_frames
                assert s.noise_sigma == 0.0


def test_fast_suite_instances_are_fast_stratum():
    specs = synth.scenario_suite("fast", count=5, seed=1)
    for spec in specs:
        truth = synth.build_truth(spec)
        vals = set(truth.strata.values())
        assert vals <= {"fast", "slow"}
        # multi-frame instances must be fast; lone frames default to slow
        multi = [k for k in truth.strata
                 if sum(1 for kk in truth.strata if kk[0] == k[0]) > 1]
        assert all(truth.strata[k] == "fast" for k in multi)
        assert any(truth.strata[k] == "fast" for k in truth.strata)


def test_scene_roundtrip(tmp_path):
    spec = synth.scenario_suite("occlusion", count=1, seed=9)[0]
    frames, truth = synth.render_scene(spec)
    root = tmp_path / "scene"
    synth.save_scene(root, spec, frames, truth)
    spec2, frames2, truth2 = synth.load_scene(root)
    assert spec2.to_dict() == spec.to_dict()
    assert len(frames2) == len(frames)
    # PPM quantization: float -> u8 -> float stays within half a step
    for a, b in zip(frames, frames2):
        assert np.abs(a - b).max() <= (0.5 / 255.0) + 1e-6
    assert truth2.boxes_by_frame.keys() == truth.boxes_by_frame.keys()
    for t in truth.boxes_by_frame:
        for (ta, ca, ba), (tb, cb, bb) in zip(truth.boxes_by_frame[t],
                                              truth2.boxes_by_frame[t]):
            assert ta == tb and ca == cb and np.allclose(ba, bb)
    # truth jsonl exists with stratum fields
    lines = [json.loads(l) for l in (root / "truth.jsonl").read_text().splitlines()]
    assert lines and all(
        set(r) >= {"frame", "track", "class_id", "box", "stratum"} for r in lines)
    # adjacent-pair flow files exist in both directions
    assert (root / "flow" / "flow_0000_0001.flo").exists()
    assert (root / "flow" / "flow_0001_0000.flo").exists()


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(19, 31, 3), dtype=np.uint8)
    imaging.write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(imaging.read_ppm(tmp_path / "x.ppm"), img)


def test_frame_u8_conversions():
    rng = np.random.default_rng(1)
    frame = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
    u8 = imaging.frame_to_u8(frame)
    back = imaging.u8_to_frame(u8)
    assert back.shape == frame.shape
    assert np.abs(back - frame).max() <= 0.5 / 255.0 + 1e-6
