"""Shared feature pyramid: a small bottom-up convnet with lateral and
top-down connections producing levels P3..P6 (strides 8, 16, 32, 64).

The bottom-up stack is 4 stages of two 3x3 convs with a rectifier; stage 1
downsamples twice (both convs stride 2), stages 2-4 once each, so the
deepest map sits at stride 32 and a final stride-2 conv over it yields P6.
Inputs must be (1, 3, h, w) with h and w divisible by 64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigurationError, DimensionError
from .tensorio import load_tnsr, require_tensor, save_tnsr

WGTS_MAGIC = b"WGTS"
LEVELS = (3, 4, 5, 6)


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 32

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be positive, got {self.channels}")


@dataclass
class FeaturePyramid:
    """Maps level -> (1, c, h, w) feature tensor; stride of level i is 2**i."""

    levels: dict

    def __getitem__(self, level: int) -> np.ndarray:
        return self.levels[level]

    def __iter__(self):
        return iter(sorted(self.levels))

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    @staticmethod
    def stride(level: int) -> int:
        return 2 ** level


# bottom-up stage convs carry (stride, rectified); the rest are linear
_PLAN = [
    ("stage1.conv1", 2, True), ("stage1.conv2", 2, True),
    ("stage2.conv1", 2, True), ("stage2.conv2", 1, True),
    ("stage3.conv1", 2, True), ("stage3.conv2", 1, True),
    ("stage4.conv1", 2, True), ("stage4.conv2", 1, True),
]
_LATERALS = ["lateral3", "lateral4", "lateral5"]
_MERGES = ["merge3", "merge4", "merge5"]
_P6 = "p6"


@dataclass
class BackboneWeights:
    """Ordered name -> ConvSpec mapping for the whole pyramid."""

    convs: dict
    config: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        expected = [n for n, _, _ in _PLAN] + _LATERALS + _MERGES + [_P6]
        missing = [n for n in expected if n not in self.convs]
        if missing:
            raise ConfigurationError(f"backbone weights missing convs {missing}")


def ortho_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3, **kw) -> K.ConvSpec:
    """Seeded semi-orthogonal init with rectifier gain sqrt(2).

    Orthonormal maps carry activation energy through depth without the
    per-draw amplification/attenuation of plain Gaussian filters, so feature
    quality is far more uniform across seeds.
    """
    fan = cin * k * k
    a = rng.standard_normal((max(cout, fan), min(cout, fan)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    w = q if cout >= fan else q.T
    kernel = (np.sqrt(2.0) * w[:cout, :fan]).reshape(cout, cin, k, k).astype(np.float32)
    return K.ConvSpec(kernel, np.zeros(cout, np.float32), **kw)


def mirrored_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3,
                  **kw) -> K.ConvSpec:
    """Orthogonal filters paired with their negations, for rectified layers.

    relu(Wx) and relu(-Wx) together recover Wx exactly, so a rectified conv
    initialized this way is information-lossless: no seed can rotate the
    class-bearing directions into dead rectifier zones.
    """
    half = ortho_conv(rng, cout // 2, cin, k, **kw)
    kernel = np.concatenate([half.kernel, -half.kernel], axis=0)
    return K.ConvSpec(kernel, np.zeros(cout, np.float32), **kw)


def init_backbone_weights(seed: int, config: BackboneConfig | None = None) -> BackboneWeights:
    config = config or BackboneConfig()
    c = config.channels
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B]))
    convs = {}
    for name, stride, _ in _PLAN:  # rectified stages: mirrored pairs
        cin = 3 if name == "stage1.conv1" else c
        convs[name] = mirrored_conv(rng, c, cin, 3, stride=stride, padding=1)
    for name in _LATERALS:  # linear layers: plain orthogonal is already lossless
        convs[name] = ortho_conv(rng, c, c, 1)
    for name in _MERGES:
        convs[name] = ortho_conv(rng, c, c, 3, padding=1)
    convs[_P6] = ortho_conv(rng, c, c, 3, stride=2, padding=1)
    return BackboneWeights(convs, config)


def extract_pyramid(frame: np.ndarray, weights: BackboneWeights) -> FeaturePyramid:
    frame = require_tensor(frame, "frame")
    if frame.shape[0] != 1 or frame.shape[1] != 3:
        raise DimensionError(f"frame must be (1, 3, h, w), got {frame.shape}")
    h, w = frame.shape[2], frame.shape[3]
    if h % 64 or w % 64:
        raise DimensionError(f"frame size {h}x{w} must be divisible by 64")
    cv = weights.convs

    x = frame - np.float32(0.5)  # map [0, 1] pixels to a zero-centered range
    feats = {}
    for name, _, rectified in _PLAN:
        x = K.conv2d(x, cv[name])
        if rectified:
            x = K.relu(x)
        if name == "stage2.conv2":
            feats[3] = x   # stride 8
        elif name == "stage3.conv2":
            feats[4] = x   # stride 16
        elif name == "stage4.conv2":
            feats[5] = x   # stride 32

    p5 = K.conv2d(K.conv2d(feats[5], cv["lateral5"]), cv["merge5"])
    lat4 = K.conv2d(feats[4], cv["lateral4"])
    p4 = K.conv2d(lat4 + K.upsample_nearest(p5, 2, lat4.shape[2:]), cv["merge4"])
    lat3 = K.conv2d(feats[3], cv["lateral3"])
    p3 = K.conv2d(lat3 + K.upsample_nearest(p4, 2, lat3.shape[2:]), cv["merge3"])
    p6 = K.conv2d(feats[5], cv[_P6])
    return FeaturePyramid({3: p3, 4: p4, 5: p5, 6: p6})


def dual_pyramids(frame, motion_weights, sampling_weights):
    """Unshared per-stream pyramids computed from one frame."""
    return (extract_pyramid(frame, motion_weights),
            extract_pyramid(frame, sampling_weights))


def level_sizes(h: int, w: int) -> dict:
    return {lv: (h // 2 ** lv, w // 2 ** lv) for lv in LEVELS}


# ---------------------------------------------------------------------------
# WGTS checkpoints: magic, uint32 manifest length, JSON manifest describing
# named convs (stride/padding/dilation), then kernel+bias TNSR records in
# manifest order. Shared by every weight bundle in the package.

def save_weights(path, convs: dict, extras: dict | None = None) -> None:
    manifest = {
        "convs": [
            {"name": n, "stride": s.stride, "padding": s.padding, "dilation": s.dilation}
            for n, s in convs.items()
        ],
        "extras": extras or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WGTS_MAGIC)
        f.write(np.array([len(payload)], dtype="<u4").tobytes())
        f.write(payload)
        for spec in convs.values():
            save_tnsr(f, spec.kernel)
            save_tnsr(f, spec.bias.reshape(1, -1, 1, 1))


def load_weights(path) -> tuple:
    """Returns (convs dict, extras dict). Raises ValueError on corruption."""
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != WGTS_MAGIC:
                raise ValueError(f"bad WGTS magic {magic!r}")
            (mlen,) = np.frombuffer(f.read(4), dtype="<u4")
            manifest = json.loads(f.read(int(mlen)).decode("utf-8"))
            convs = {}
            for entry in manifest["convs"]:
                kernel = load_tnsr(f)
                bias = load_tnsr(f).reshape(-1)
                convs[entry["name"]] = K.ConvSpec(
                    kernel, bias, stride=entry["stride"],
                    padding=entry["padding"], dilation=entry["dilation"],
                )
            return convs, manifest.get("extras", {})
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError, ValueError) as exc:
        if "corrupt WGTS" in str(exc):
            raise
        raise ValueError(f"corrupt WGTS checkpoint {path}: {exc}") from exc


def save_backbone(path, weights: BackboneWeights) -> None:
    save_weights(path, weights.convs, {"module": "backbone", "channels": weights.config.channels})


def load_backbone(path) -> BackboneWeights:
    convs, extras = load_weights(path)
    if extras.get("module") != "backbone":
        raise ValueError(f"{path}: checkpoint is not a backbone bundle ({extras.get('module')!r})")
    return BackboneWeights(convs, BackboneConfig(int(extras.get("channels", 32))))
