"""Procedural video scenes with exact ground truth.

Moving textured shapes (disc / rectangle / triangle = classes 1 / 2 / 3) glide
over a static textured background at constant velocity.  Textures are
smoothstep-interpolated value grids, so frames are C^1 in the sample
coordinates and backward warping by the true flow reproduces object interiors
to high accuracy.  Optional degradations: motion blur (line kernel), a moving
occluder bar that rides one object, additive Gaussian noise.

Scenes serialize to a directory: frames/*.ppm, truth.jsonl, flow/*.flo for
adjacent frame pairs, manifest.json.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, flowio, imaging
from .errors import ConfigurationError

SHAPE_FOR_CLASS = {1: "disc", 2: "rectangle", 3: "triangle"}
CLASS_FOR_SHAPE = {v: k for k, v in SHAPE_FOR_CLASS.items()}
# class identity lives in the color tint: three well-separated RGB
# directions that survive downsampling, motion blur, sensor noise, and
# temporal feature averaging (high-frequency texture signatures smear under
# sub-cell warp misalignment and die; a DC color offset does not); texture
# cells stay near the backbone stride so boundary phase remains usable for
# box regression
CLASS_TEXTURE_CELL = {1: 5.0, 2: 7.0, 3: 10.0}
CLASS_TINT = {
    1: (0.75, 0.22, 0.22),
    2: (0.10, 0.85, 0.12),
    3: (0.25, 0.35, 0.85),
}
CLASS_CONTRAST = {1: 0.40, 2: 0.40, 3: 0.40}
NEUTRAL_TINT = (0.5, 0.5, 0.5)
RECT_ASPECT = 0.7     # rectangle height = RECT_ASPECT * size
MIN_VISIBLE_PX = 4.0  # clipped box must keep this many px on each side
MIN_VISIBLE_FRAC = 0.25


# ---------------------------------------------------------------------------
# textures


def texture_grid(seed: int, cells: int = 8) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E87]))
    return rng.uniform(0.08, 0.92, size=(cells, cells, 3))


def sample_texture(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                   cell_size: float) -> np.ndarray:
    """Smoothstep-bilinear sample of a wrapping value grid at float coords."""
    gh, gw = grid.shape[:2]
    u = np.asarray(xs, np.float64) / cell_size
    v = np.asarray(ys, np.float64) / cell_size
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    su = fu * fu * (3.0 - 2.0 * fu)  # C^1 smoothstep blend
    sv = fv * fv * (3.0 - 2.0 * fv)
    i0 %= gw
    j0 %= gh
    i1 = (i0 + 1) % gw
    j1 = (j0 + 1) % gh
    su = su[..., None]
    sv = sv[..., None]
    top = grid[j0, i0] * (1.0 - su) + grid[j0, i1] * su
    bot = grid[j1, i0] * (1.0 - su) + grid[j1, i1] * su
    return top * (1.0 - sv) + bot * sv


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class ObjectSpec:
    shape: str            # disc | rectangle | triangle
    class_id: int
    size: float           # px; characteristic diameter / width
    start: tuple          # (cx, cy) at frame 0
    velocity: tuple       # (vx, vy) px / frame
    texture_seed: int

    def to_dict(self):
        return {"shape": self.shape, "class_id": self.class_id,
                "size": self.size, "start": list(self.start),
                "velocity": list(self.velocity),
                "texture_seed": self.texture_seed}

    @staticmethod
    def from_dict(d):
        return ObjectSpec(d["shape"], int(d["class_id"]), float(d["size"]),
                          tuple(d["start"]), tuple(d["velocity"]),
                          int(d["texture_seed"]))


@dataclass
class OccluderSpec:
    width_frac: float     # fraction of the target object's box width covered
    start_frame: int
    duration: int
    texture_seed: int
    target: int = 0       # object index the bar rides

    def to_dict(self):
        return {"width_frac": self.width_frac, "start_frame": self.start_frame,
                "duration": self.duration, "texture_seed": self.texture_seed,
                "target": self.target}

    @staticmethod
    def from_dict(d):
        return OccluderSpec(float(d["width_frac"]), int(d["start_frame"]),
                            int(d["duration"]), int(d["texture_seed"]),
                            int(d.get("target", 0)))


@dataclass
class SceneSpec:
    name: str
    seed: int
    hw: tuple             # (h, w)
    frames: int
    objects: list = field(default_factory=list)
    occluder: OccluderSpec = None
    blur_frames: tuple = ()
    blur_length: int = 0  # odd px; 0 disables
    blur_angle: float = 0.0
    noise_sigma: float = 0.0
    noise_sigma_degraded: float = 0.0  # extra noise on blurred frames only
    background_seed: int = 0
    background_amplitude: float = 1.0  # texture contrast; 0 = flat gray

    def to_dict(self):
        return {
            "name": self.name, "seed": self.seed, "hw": list(self.hw),
            "frames": self.frames,
            "objects": [o.to_dict() for o in self.objects],
            "occluder": self.occluder.to_dict() if self.occluder else None,
            "blur_frames": list(self.blur_frames),
            "blur_length": self.blur_length, "blur_angle": self.blur_angle,
            "noise_sigma": self.noise_sigma,
            "noise_sigma_degraded": self.noise_sigma_degraded,
            "background_seed": self.background_seed,
            "background_amplitude": self.background_amplitude,
        }

    @staticmethod
    def from_dict(d):
        occ = d.get("occluder")
        return SceneSpec(
            d["name"], int(d["seed"]), tuple(d["hw"]), int(d["frames"]),
            [ObjectSpec.from_dict(o) for o in d["objects"]],
            OccluderSpec.from_dict(occ) if occ else None,
            tuple(int(t) for t in d.get("blur_frames", ())),
            int(d.get("blur_length", 0)), float(d.get("blur_angle", 0.0)),
            float(d.get("noise_sigma", 0.0)),
            float(d.get("noise_sigma_degraded", 0.0)),
            int(d.get("background_seed", 0)),
            float(d.get("background_amplitude", 1.0)),
        )


# ---------------------------------------------------------------------------
# geometry


def object_center(obj: ObjectSpec, t: int) -> tuple:
    return (obj.start[0] + obj.velocity[0] * t, obj.start[1] + obj.velocity[1] * t)


def object_box(obj: ObjectSpec, t: int) -> np.ndarray:
    """Unclipped (x1, y1, x2, y2) in pixel-center coordinates."""
    cx, cy = object_center(obj, t)
    if obj.shape == "disc":
        r = obj.size / 2.0
        hw_ = (r, r)
    elif obj.shape == "rectangle":
        hw_ = (obj.size / 2.0, obj.size * RECT_ASPECT / 2.0)
    elif obj.shape == "triangle":
        hw_ = (obj.size / 2.0, obj.size / 2.0)
    else:
        raise ConfigurationError(f"unknown shape {obj.shape!r}")
    return np.array([cx - hw_[0], cy - hw_[1], cx + hw_[0], cy + hw_[1]], np.float64)


def visible_box(obj: ObjectSpec, t: int, hw: tuple):
    """Box clipped to the canvas, or None when the object is effectively gone."""
    h, w = hw
    b = object_box(obj, t)
    c = np.array([max(b[0], 0.0), max(b[1], 0.0),
                  min(b[2], w - 1.0), min(b[3], h - 1.0)])
    cw, ch = c[2] - c[0], c[3] - c[1]
    if cw < MIN_VISIBLE_PX or ch < MIN_VISIBLE_PX:
        return None
    full = (b[2] - b[0]) * (b[3] - b[1])
    if full <= 0 or (cw * ch) / full < MIN_VISIBLE_FRAC:
        return None
    return c


def object_mask(obj: ObjectSpec, t: int, hw: tuple) -> np.ndarray:
    """Boolean (h, w) interior mask at integer pixel centers."""
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = object_center(obj, t)
    if obj.shape == "disc":
        r = obj.size / 2.0
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if obj.shape == "rectangle":
        return (np.abs(xs - cx) <= obj.size / 2.0) & \
               (np.abs(ys - cy) <= obj.size * RECT_ASPECT / 2.0)
    if obj.shape == "triangle":
        # isoceles, apex up: |x - cx| <= (y - y_top) / 2 within the box
        half = obj.size / 2.0
        y_top = cy - half
        return (ys >= y_top) & (ys <= cy + half) & \
               (np.abs(xs - cx) <= (ys - y_top) / 2.0)
    raise ConfigurationError(f"unknown shape {obj.shape!r}")


def occluder_mask(spec: SceneSpec, t: int) -> np.ndarray:
    h, w = spec.hw
    occ = spec.occluder
    if occ is None or not (occ.start_frame <= t < occ.start_frame + occ.duration):
        return np.zeros((h, w), bool)
    target = spec.objects[occ.target]
    box = object_box(target, t)
    cx = 0.5 * (box[0] + box[2])
    half = 0.5 * occ.width_frac * (box[2] - box[0])
    xs = np.arange(w, dtype=np.float64)
    col = np.abs(xs - cx) <= half
    return np.broadcast_to(col[None, :], (h, w)).copy()


# ---------------------------------------------------------------------------
# rendering


def _render_clean(spec: SceneSpec, t: int) -> np.ndarray:
    """(h, w, 3) float64 frame before blur / noise."""
    h, w = spec.hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # background and occluder are achromatic: class identity is carried by
    # color tint, so keeping everything non-object on the gray axis removes
    # accidental class-colored patches
    bg = texture_grid(spec.background_seed).mean(axis=2, keepdims=True).repeat(3, axis=2)
    img = sample_texture(bg, xs, ys, cell_size=24.0)
    if spec.background_amplitude != 1.0:
        img = 0.5 + (img - 0.5) * spec.background_amplitude
    for obj in spec.objects:
        mask = object_mask(obj, t, spec.hw)
        if not mask.any():
            continue
        cx, cy = object_center(obj, t)
        grid = texture_grid(obj.texture_seed)
        cell = CLASS_TEXTURE_CELL.get(obj.class_id, 6.0)
        tex = sample_texture(grid, xs - cx, ys - cy, cell_size=cell)
        tint = np.asarray(CLASS_TINT.get(obj.class_id, NEUTRAL_TINT))
        tex = tint + (tex - 0.5) * CLASS_CONTRAST.get(obj.class_id, 1.0)
        img[mask] = tex[mask]
    occ = occluder_mask(spec, t)
    if occ.any():
        target = spec.objects[spec.occluder.target]
        ocx, _ = object_center(target, t)
        grid = texture_grid(spec.occluder.texture_seed).mean(
            axis=2, keepdims=True).repeat(3, axis=2)
        tex = sample_texture(grid, xs - ocx, ys, cell_size=10.0)
        img[occ] = tex[occ]
    return img


def line_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized (length, length) motion-blur kernel along a line."""
    if length < 3 or length % 2 == 0:
        raise ConfigurationError(f"blur length must be odd and >= 3, got {length}")
    k = np.zeros((length, length), np.float64)
    c = (length - 1) / 2.0
    n = 4 * length
    ss = np.linspace(-c, c, n)
    for s in ss:
        x = c + s * np.cos(angle)
        y = c + s * np.sin(angle)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy_, dx_, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                              (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            yy, xx = y0 + dy_, x0 + dx_
            if 0 <= yy < length and 0 <= xx < length:
                k[yy, xx] += wgt
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    pad = np.pad(img, ((py, py), (px, px), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    for r, c in zip(*np.nonzero(kernel)):
        out += kernel[r, c] * pad[r:r + h, c:c + w]
    return out


@dataclass
class SceneTruth:
    spec: SceneSpec
    boxes_by_frame: dict      # frame -> list of (track, class_id, (4,) box)
    strata: dict              # (track, frame) -> stratum name

    def tracks(self) -> list:
        by_track = {}
        for t, rows in self.boxes_by_frame.items():
            for track, class_id, box in rows:
                by_track.setdefault(track, (class_id, {}))[1][t] = box
        return [evaluation.GroundTruthTrack(tid, cid, boxes)
                for tid, (cid, boxes) in sorted(by_track.items())]


def build_truth(spec: SceneSpec) -> SceneTruth:
    boxes_by_frame = {}
    for t in range(spec.frames):
        rows = []
        for i, obj in enumerate(spec.objects):
            box = visible_box(obj, t, spec.hw)
            if box is not None:
                rows.append((i, obj.class_id, box))
        boxes_by_frame[t] = rows
    truth = SceneTruth(spec, boxes_by_frame, {})
    truth.strata = evaluation.speed_stratify(truth.tracks())
    return truth


def render_frame(spec: SceneSpec, t: int) -> np.ndarray:
    """(1, 3, h, w) float32 in [0, 1]."""
    img = _render_clean(spec, t)
    if spec.blur_length and t in spec.blur_frames:
        img = _blur(img, line_blur_kernel(spec.blur_length, spec.blur_angle))
    sigma = spec.noise_sigma
    if spec.noise_sigma_degraded > 0 and spec.blur_length and t in spec.blur_frames:
        sigma = spec.noise_sigma_degraded
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, t, 0x015E]))
        img = img + rng.normal(0.0, sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None].astype(np.float32))


def render_scene(spec: SceneSpec):
    """-> (frames list of (1, 3, h, w) float32, SceneTruth)."""
    frames = [render_frame(spec, t) for t in range(spec.frames)]
    return frames, build_truth(spec)


def truth_flow_full(truth: SceneTruth, t: int, tau: int) -> np.ndarray:
    """Exact flow mapping frame t coords onto frame t+tau, (1, 2, h, w) f32.

    Inside each object's frame-t mask the flow equals velocity * tau; later
    objects paint over earlier ones, background stays zero.
    """
    spec = truth.spec
    h, w = spec.hw
    flow = np.zeros((1, 2, h, w), np.float32)
    for obj in spec.objects:
        mask = object_mask(obj, t, spec.hw)
        flow[0, 0][mask] = np.float32(obj.velocity[0] * tau)
        flow[0, 1][mask] = np.float32(obj.velocity[1] * tau)
    return flow


# ---------------------------------------------------------------------------
# disk layout


def save_scene(root, spec: SceneSpec, frames: list, truth: SceneTruth) -> None:
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "flow"), exist_ok=True)
    for t, frame in enumerate(frames):
        imaging.write_ppm(os.path.join(root, "frames", f"frame_{t:04d}.ppm"),
                          imaging.frame_to_u8(frame))
    with open(os.path.join(root, "truth.jsonl"), "w") as f:
        for t in range(spec.frames):
            for track, class_id, box in truth.boxes_by_frame[t]:
                rec = {"frame": t, "track": track, "class_id": class_id,
                       "box": [round(float(v), 4) for v in box],
                       "stratum": truth.strata.get((track, t), "slow")}
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    for t in range(spec.frames - 1):
        for a, b in ((t, t + 1), (t + 1, t)):
            fl = truth_flow_full(truth, a, b - a)[0].transpose(1, 2, 0)
            flowio.write_flo(os.path.join(root, "flow", f"flow_{a:04d}_{b:04d}.flo"),
                             fl.astype(np.float32))
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump({"format": "ssvd-scene-v1", "spec": spec.to_dict()},
                  f, indent=2, sort_keys=True)


def load_scene(root):
    """-> (spec, frames, truth); truth is rebuilt analytically from the spec."""
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "ssvd-scene-v1":
        raise ConfigurationError(f"{root}: not a scene directory")
    spec = SceneSpec.from_dict(manifest["spec"])
    frames = [imaging.u8_to_frame(
                  imaging.read_ppm(os.path.join(root, "frames", f"frame_{t:04d}.ppm")))
              for t in range(spec.frames)]
    return spec, frames, build_truth(spec)


# ---------------------------------------------------------------------------
# scenario suites

SUITE_KINDS = ("clean", "blur", "occlusion", "fast")


def _place_object(rng, hw, size, speed_range, retries: int = 200):
    """Start + velocity keeping the object inside the canvas for 12 frames."""
    h, w = hw
    margin = size / 2.0 + 2.0
    for _ in range(retries):
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(*speed_range)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        ex, ey = cx + vx * 11, cy + vy * 11
        if margin <= ex <= w - margin and margin <= ey <= h - margin:
            return (cx, cy), (vx, vy)
    # fall back: park it in the middle, crawl toward a corner
    return (w / 2.0, h / 2.0), (speed_range[0] * 0.7, speed_range[0] * 0.7)


def scenario_suite(kind: str, count: int = 20, seed: int = 0) -> list:
    """Deterministic list of SceneSpecs for one degradation regime."""
    if kind not in SUITE_KINDS:
        raise ConfigurationError(f"unknown suite {kind!r}; choose from {SUITE_KINDS}")
    specs = []
    for i in range(count):
        rng = np.random.default_rng(
            np.random.SeedSequence([SUITE_KINDS.index(kind), seed, i]))
        if kind == "fast":
            hw, frames = (192, 192), 10
        else:
            hw, frames = (128, 128), 12
        n_obj = 1 if kind == "fast" else 2
        classes = list(rng.permutation([1, 2, 3])[:n_obj])
        objects = []
        for c in classes:
            c = int(c)
            size = float(rng.uniform(22.0, 34.0))
            if kind == "fast":
                # streak across the canvas: enters one side, exits the other
                speed = float(rng.uniform(24.0, 48.0))
                sgn = 1.0 if rng.uniform() < 0.5 else -1.0
                cy = float(rng.uniform(size, hw[0] - size))
                cx = size / 2.0 + 4.0 if sgn > 0 else hw[1] - size / 2.0 - 4.0
                start, vel = (cx, cy), (sgn * speed, float(rng.uniform(-3.0, 3.0)))
            else:
                start, vel = _place_object(rng, hw, size, (1.0, 4.0))
            objects.append(ObjectSpec(SHAPE_FOR_CLASS[c], c, size, start, vel, c))
        occ = None
        blur_frames, blur_length, blur_angle = (), 0, 0.0
        noise, noise_deg = 0.0, 0.0
        if kind == "blur":
            n_blur = int(round(frames * rng.uniform(0.5, 0.7)))
            blur_frames = tuple(sorted(int(t) for t in
                                       rng.choice(frames, size=n_blur, replace=False)))
            blur_length = int(rng.choice([17, 21, 25, 29]))
            blur_angle = float(rng.uniform(0.0, np.pi))
            # blurred frames also carry heavy sensor noise: single-frame
            # detection degrades while temporal averaging cancels it
            noise, noise_deg = 0.005, 0.10
        elif kind == "occlusion":
            dur = int(rng.integers(3, 9))
            t0 = int(rng.integers(2, max(3, frames - dur)))
            occ = OccluderSpec(float(rng.uniform(0.3, 0.6)), t0, dur,
                               texture_seed=900 + i, target=0)
            noise = 0.01
        elif kind == "fast":
            noise = 0.01
        specs.append(SceneSpec(
            name=f"{kind}_{i:03d}", seed=seed * 1000 + i, hw=hw, frames=frames,
            objects=objects, occluder=occ, blur_frames=blur_frames,
            blur_length=blur_length, blur_angle=blur_angle, noise_sigma=noise,
            noise_sigma_degraded=noise_deg,
            background_seed=500 + 1000 * seed + i,
            # full-amplitude background texture drowns the class textures in
            # an untrained pyramid; keep it visible but subordinate
            background_amplitude=0.25))
    return specs
