"""Self-check: one cheap named assertion per module invariant, plus small
brute-force cross-checks. `run_all` returns (all_ok, report lines); the CLI
exits non-zero when any check fails.
"""

import os
import tempfile

import numpy as np

from . import kernels as K
from . import synth
from .backbone import (extract_pyramid, init_backbone_weights, level_sizes,
                       load_backbone, save_backbone)
from .calibration import natural_level
from .config import PipelineConfig, default_config
from .errors import ConfigurationError
from .evaluation import GroundTruthTrack, evaluate, iou, speed_stratify
from .heads import (decode_boxes, encode_boxes, generate_anchors, head_forward,
                    init_head_weights, iou_matrix, match_anchors)
from .losses import focal_loss, loss_gradients, sigmoid, total_loss
from .motion import ExactSyntheticFlow, aggregate_motion, downscale_flow
from .postprocess import Detections, nms, seq_nms
from .sampling import (OFFSET_CHANNELS, hallucinate, init_offset_predictor,
                       init_sampler, predict_offsets)
from .pipeline import (build_model, infer_video, load_model, save_model,
                       select_supports)

_CHECKS = []


def _check(name):
    def wrap(fn):
        _CHECKS.append((name, fn))
        return fn
    return wrap


def _rng(salt):
    return np.random.default_rng(np.random.SeedSequence([0x5E1F, salt]))


def _rand_conv(rng, cout, cin, k=3, padding=1):
    return K.ConvSpec(rng.normal(0, 0.2, (cout, cin, k, k)).astype(np.float32),
                      rng.normal(0, 0.1, cout).astype(np.float32), padding=padding)


# --- kernels ---------------------------------------------------------------

@_check("kernels-conv-identity")
def _kernel_conv_identity():
    rng = _rng(1)
    x = rng.normal(0, 1, (1, 3, 8, 9)).astype(np.float32)
    eye = np.zeros((3, 3, 1, 1), np.float32)
    eye[np.arange(3), np.arange(3), 0, 0] = 1.0
    spec = K.ConvSpec(eye, np.zeros(3, np.float32))
    assert np.allclose(K.conv2d(x, spec), x, atol=1e-6)


@_check("kernels-deform-zero-offsets-match-conv")
def _kernel_deform_zero():
    rng = _rng(2)
    x = rng.normal(0, 1, (1, 8, 10, 11)).astype(np.float32)
    spec = _rand_conv(rng, 6, 8)
    offsets = np.zeros((1, 2 * 9 * 4, 10, 11), np.float32)
    assert np.abs(K.deform_conv(x, offsets, spec, 4) - K.conv2d(x, spec)).max() < 1e-5


@_check("kernels-warp-zero-flow-identity")
def _kernel_warp_identity():
    rng = _rng(3)
    x = rng.normal(0, 1, (1, 4, 7, 9)).astype(np.float32)
    out = K.warp(x, np.zeros((1, 2, 7, 9), np.float32))
    assert np.array_equal(out, x)


@_check("kernels-bilinear-fixture")
def _kernel_bilinear_fixture():
    feat = np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4)
    val = K.bilinear_sample(feat, np.array([[1.5, 0.5]]))  # (x, y)
    assert np.isclose(val[0, 0], 0.5 * (1.5 + 5.5))  # mean of row interpolants


@_check("kernels-backend-agreement")
def _kernel_backends_agree():
    rng = _rng(4)
    x = rng.normal(0, 1, (1, 5, 9, 8)).astype(np.float32)
    spec = _rand_conv(rng, 4, 5)
    oh, ow = spec.out_size(9, 8)
    outs = [K.backend_module(n).conv2d_f32(x, spec.kernel, spec.bias, spec.stride,
                                           spec.padding, spec.dilation, oh, ow)
            for n in K.available_backends()]
    for o in outs[1:]:
        assert np.abs(o - outs[0]).max() < 1e-5


# --- backbone --------------------------------------------------------------

@_check("backbone-level-geometry-448")
def _backbone_geometry():
    sizes = level_sizes(448, 448)
    assert sizes == {3: (56, 56), 4: (28, 28), 5: (14, 14), 6: (7, 7)}


@_check("backbone-anchor-count-448")
def _backbone_anchor_count():
    anchors = generate_anchors((448, 448))
    assert anchors.boxes.shape == (37485, 4)


@_check("backbone-pyramid-shapes")
def _backbone_pyramid_shapes():
    w = init_backbone_weights(0)
    pyr = extract_pyramid(np.full((1, 3, 64, 128), 0.25, np.float32), w)
    for lv in pyr:
        f = pyr[lv]
        assert f.shape == (1, w.config.channels, 64 // 2 ** lv, 128 // 2 ** lv)


@_check("backbone-checkpoint-roundtrip")
def _backbone_roundtrip():
    w = init_backbone_weights(7)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "b.wgts")
        save_backbone(path, w)
        w2 = load_backbone(path)
        for name, spec in w.convs.items():
            assert np.array_equal(spec.kernel, w2.convs[name].kernel)


@_check("backbone-corrupt-checkpoint-rejected")
def _backbone_corrupt():
    w = init_backbone_weights(7)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "b.wgts")
        save_backbone(path, w)
        blob = open(path, "rb").read()
        for broken in (blob[: len(blob) // 2],          # truncated payload
                       b"XGTS" + blob[4:],              # wrong magic
                       blob[:6] + b"\xff" + blob[7:]):  # mangled manifest
            open(path, "wb").write(broken)
            try:
                load_backbone(path)
            except ValueError as exc:
                assert "backbone" in str(exc) or "WGTS" in str(exc)
            else:
                raise AssertionError("corrupt checkpoint loaded silently")


# --- motion stream ---------------------------------------------------------

@_check("motion-flow-downscale-halving")
def _motion_downscale():
    full = np.full((1, 2, 64, 64), 16.0, np.float32)
    levels = downscale_flow(full)
    for lv, fl in levels.items():
        assert np.allclose(fl, 16.0 / 2 ** lv)


@_check("motion-exact-flow-matches-velocity")
def _motion_exact_flow():
    spec = synth.SceneSpec("check", 3, (64, 64), 4,
                           objects=[synth.ObjectSpec("disc", 1, 20.0, (32.0, 32.0), (2.0, 1.0), 0)])
    fl = ExactSyntheticFlow(synth.build_truth(spec)).flow(0, 1)[3]
    # object-interior flow at the stride-8 level: (vx, vy) * tau / 8
    assert np.isclose(fl[0, 0, 4, 4], 2.0 / 8) and np.isclose(fl[0, 1, 4, 4], 1.0 / 8)


@_check("motion-aggregate-of-clones-is-identity")
def _motion_aggregate_identity():
    rng = _rng(5)
    from .backbone import FeaturePyramid
    pyr = FeaturePyramid({3: rng.normal(0, 1, (1, 4, 8, 8)).astype(np.float32)})
    agg = aggregate_motion([pyr, pyr, pyr])
    assert np.allclose(agg[3], pyr[3], atol=1e-6)


# --- sampling stream -------------------------------------------------------

@_check("sampling-offset-channel-count")
def _sampling_channels():
    assert OFFSET_CHANNELS == 72
    w = init_offset_predictor(0, 8)
    rng = _rng(6)
    f = rng.normal(0, 1, (1, 8, 8, 8)).astype(np.float32)
    assert predict_offsets(f, f, w).shape == (1, 72, 8, 8)


@_check("sampling-zero-init-predicts-zero")
def _sampling_zero_init():
    w = init_offset_predictor(3, 8)
    rng = _rng(7)
    f = rng.normal(0, 1, (1, 8, 6, 6)).astype(np.float32)
    assert np.abs(predict_offsets(f, f, w)).max() == 0.0


@_check("sampling-center-tap-identity")
def _sampling_center_tap():
    rng = _rng(8)
    f = rng.normal(0, 1, (1, 8, 6, 7)).astype(np.float32)
    out = hallucinate(f, np.zeros((1, 72, 6, 7), np.float32), init_sampler(8))
    assert np.abs(out - f).max() < 1e-6


# --- heads -----------------------------------------------------------------

@_check("heads-anchor-slices-partition")
def _heads_slices():
    anchors = generate_anchors((128, 128))
    stops = [0]
    for lv in sorted(anchors.level_slices):
        sl = anchors.level_slices[lv]
        assert sl.start == stops[-1]
        stops.append(sl.stop)
    assert stops[-1] == anchors.boxes.shape[0]


@_check("heads-box-encode-decode-roundtrip")
def _heads_roundtrip():
    rng = _rng(9)
    a = np.sort(rng.uniform(0, 60, (40, 4)), axis=1)[:, [0, 1, 2, 3]]
    a = np.stack([a[:, 0], a[:, 1], a[:, 0] + 5 + a[:, 2], a[:, 1] + 5 + a[:, 3]], 1)
    b = a + rng.uniform(-2, 2, a.shape)
    assert np.abs(decode_boxes(a, encode_boxes(a, b)) - b).max() < 1e-6


@_check("heads-matching-forces-a-claim")
def _heads_force_claim():
    anchors = generate_anchors((64, 64))
    gt = np.array([[3.0, 3.0, 9.0, 9.0]])  # tiny box below the fg IoU cut
    m = match_anchors(anchors, gt, np.array([1]))
    assert m.num_foreground >= 1


@_check("heads-iou-fixture")
def _heads_iou():
    assert np.isclose(iou_matrix(np.array([[0, 0, 2, 2.0]]),
                                 np.array([[1, 1, 3, 3.0]]))[0, 0], 1.0 / 7.0)
    assert np.isclose(iou([0, 0, 2, 2], [1, 1, 3, 3]), 1.0 / 7.0)


# --- losses ----------------------------------------------------------------

@_check("losses-focal-vanishes-when-confident")
def _losses_confident():
    p = sigmoid(np.array([[-40.0, 40.0], [-40.0, -40.0]]))
    loss = focal_loss(p, np.array([[False, True], [False, False]]))
    assert loss.max() < 1e-12


@_check("losses-gradient-spot-check")
def _losses_gradient():
    rng = _rng(10)
    logits = rng.normal(0, 2, (6, 3))
    deltas = rng.normal(0, 1, (6, 4))
    labels = np.array([0, 1, 2, 0, 3, -1], np.int64)
    target = rng.normal(0, 1, (6, 4))
    grads = loss_gradients((logits, deltas), (logits, deltas), labels, target)
    g = grads["motion"]["logits"]
    eps = 1e-6
    for (i, j) in [(0, 0), (1, 0), (4, 2)]:
        hi, lo = logits.copy(), logits.copy()
        hi[i, j] += eps
        lo[i, j] -= eps
        fd = (total_loss((hi, deltas), (hi, deltas), labels, target).total
              - total_loss((lo, deltas), (lo, deltas), labels, target).total) / (2 * eps)
        assert abs(fd - 2 * g[i, j]) < 1e-4  # both streams see the same logits


# --- postprocessing --------------------------------------------------------

@_check("postprocess-nms-matches-bruteforce")
def _post_nms_brute():
    rng = _rng(11)
    n = 6
    xy = rng.uniform(0, 30, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(5, 15, (n, 2))])
    dets = Detections.build(boxes, rng.uniform(0.1, 1, n), np.ones(n, np.int64))
    kept = nms(dets, 0.5)
    order = np.argsort(-dets.scores, kind="stable")
    alive = []
    for i in order:
        if all(iou(dets.boxes[i], dets.boxes[j]) <= 0.5 for j in alive):
            alive.append(i)
    assert sorted(map(float, kept.scores)) == sorted(float(dets.scores[i]) for i in alive)


@_check("postprocess-seqnms-links-obvious-chain")
def _post_seqnms():
    per_frame = [Detections.build(np.array([[0, 0, 10, 10.0]]), [s], [1], frame=f)
                 for f, s in enumerate([0.2, 0.9, 0.4])]
    rescored, tubelets = seq_nms(per_frame)
    assert len(tubelets) == 1 and len(tubelets[0].members) == 3
    assert all(np.isclose(d.scores[0], 0.5) for d in rescored)


# --- evaluation ------------------------------------------------------------

@_check("evaluation-ap-worked-example")
def _eval_ap():
    tracks = [GroundTruthTrack(0, 1, {0: np.array([0, 0, 10, 10.0])}),
              GroundTruthTrack(1, 1, {1: np.array([20, 20, 30, 30.0])})]
    dets = Detections.build(
        np.array([[0, 0, 10, 10], [40, 40, 50, 50], [20, 20, 30, 30.0]]),
        [0.9, 0.8, 0.7], [1, 1, 1], frame=np.array([0, 0, 1]))
    assert np.isclose(evaluate(dets, tracks).map, 5.0 / 6.0)


@_check("evaluation-speed-strata-thresholds")
def _eval_strata():
    slow = GroundTruthTrack(0, 1, {f: np.array([0, 0, 100, 100.0]) for f in range(5)})
    fast = GroundTruthTrack(1, 1, {f: np.array([40.0 * f, 0, 40.0 * f + 30, 30]) for f in range(5)})
    med = GroundTruthTrack(2, 1, {f: np.array([2.0 * f, 0, 2.0 * f + 24, 24]) for f in range(5)})
    strata = speed_stratify([slow, fast, med])
    assert strata[(0, 2)] == "slow" and strata[(1, 2)] == "fast" and strata[(2, 2)] == "medium"


# --- synthetic data --------------------------------------------------------

@_check("synth-render-deterministic")
def _synth_deterministic():
    spec = synth.scenario_suite("blur", count=1, seed=5)[0]
    assert np.array_equal(synth.render_frame(spec, 3), synth.render_frame(spec, 3))


@_check("synth-truth-matches-velocity")
def _synth_truth():
    spec = synth.SceneSpec("check", 1, (64, 64), 3,
                           objects=[synth.ObjectSpec("disc", 1, 16.0, (30.0, 30.0), (3.0, -2.0), 0)])
    truth = synth.build_truth(spec)
    b0 = truth.boxes_by_frame[0][0][2]
    b1 = truth.boxes_by_frame[1][0][2]
    assert np.allclose(np.asarray(b1) - np.asarray(b0), [3.0, -2.0, 3.0, -2.0])


@_check("synth-scene-io-roundtrip")
def _synth_io():
    spec = synth.scenario_suite("clean", count=1, seed=2)[0]
    spec.frames = 3
    frames = [synth.render_frame(spec, t) for t in range(spec.frames)]
    with tempfile.TemporaryDirectory() as d:
        synth.save_scene(d, spec, frames, synth.build_truth(spec))
        spec2, frames2, _ = synth.load_scene(d)
        assert spec2.to_dict() == spec.to_dict()
        assert np.abs(frames2[1] - frames[1]).max() <= 0.5 / 255 + 1e-6


# --- config / pipeline -----------------------------------------------------

@_check("config-rejects-bad-buffer")
def _config_bad():
    cfg = default_config()
    cfg.aggregation.buffer_capacity = 10
    try:
        cfg.validate()
    except ConfigurationError:
        return
    raise AssertionError("inconsistent buffer accepted")


@_check("config-json-roundtrip")
def _config_roundtrip():
    cfg = default_config()
    assert PipelineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


@_check("pipeline-support-selection-rule")
def _pipeline_supports():
    agg = default_config().aggregation
    assert select_supports(12, 25, agg) == [0, 4, 8, 16, 20, 24]
    assert select_supports(0, 25, agg) == [4, 8, 12]


@_check("pipeline-natural-level-monotone")
def _pipeline_levels():
    sizes = [8, 20, 40, 80, 160]
    lv = [natural_level(np.array([0, 0, s, s], float)) for s in sizes]
    assert lv == sorted(lv) and lv[0] == 3


@_check("pipeline-model-checkpoint-roundtrip")
def _pipeline_roundtrip():
    model = build_model()
    spec = synth.scenario_suite("clean", count=1, seed=4)[0]
    spec.frames = 2
    truth = synth.build_truth(spec)
    frames = [synth.render_frame(spec, t) for t in range(spec.frames)]
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.wgts")
        save_model(path, model)
        model2 = load_model(path)
    a = infer_video(frames, model, truth=truth).per_frame
    b = infer_video(frames, model2, truth=truth).per_frame
    for x, y in zip(a, b):
        assert np.array_equal(x.boxes, y.boxes) and np.array_equal(x.scores, y.scores)


def run_all() -> tuple:
    """-> (all_ok, lines); one line per named check."""
    lines, ok = [], True
    for name, fn in _CHECKS:
        try:
            fn()
            lines.append(f"ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report, don't crash the runner
            ok = False
            lines.append(f"FAIL {name}: {exc!r}")
    lines.append(f"{len(_CHECKS)} checks, {'all passed' if ok else 'FAILURES above'}")
    return ok, lines
