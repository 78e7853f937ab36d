"""Deterministic synthetic sequences with exact ground truth.

Scenes are textured rectangles moving over a textured background:
optionally a look-alike twin crossing the target's path, opaque
occluding bars on a schedule, or a scale ramp.  Textures are seeded
random color patches with mild per-frame brightness jitter so conv
features stay informative; flat colors would collapse them.  Frames
persist as binary PPM plus a ground-truth text file in the same layout
the evaluation loader ingests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .sampling import BBox

FRAME_SIZE = (320, 240)  # width, height
DEFAULT_LENGTH = 60
_PATCH = 4  # texture patch granularity in pixels
_JITTER = 0.02  # brightness jitter amplitude


@dataclass
class ObjectSpec:
    """A textured rectangle following piecewise-linear waypoints."""
    size: tuple  # (w, h) at scale 1
    waypoints: list  # top-left (x, y) positions, interpolated over the clip
    texture_seed: int | tuple = 0
    scale_keyframes: list | None = None  # (frame, scale) pairs, else constant 1
    color_range: tuple = (100, 235)  # block color bounds of the texture


@dataclass
class OccluderSpec:
    """An opaque bar visible during [start, end), moving over waypoints."""
    size: tuple
    waypoints: list
    start: int = 0
    end: int = 10 ** 9
    color: tuple = (40, 40, 40)


@dataclass
class SceneSpec:
    target: ObjectSpec
    frame_size: tuple = FRAME_SIZE
    length: int = DEFAULT_LENGTH
    distractors: list = field(default_factory=list)
    occluders: list = field(default_factory=list)
    noise_std: float = 2.0
    seed: int = 0
    background_range: tuple = (20, 130)  # block color bounds of the backdrop

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("scene length must be >= 1")
        x0, y0 = self.target.waypoints[0]
        w, h = self.target.size
        fw, fh = self.frame_size
        if x0 < 0 or y0 < 0 or x0 + w > fw or y0 + h > fh:
            raise ValueError("target must start inside the frame")


def _interp_waypoints(waypoints, frame, length):
    """Position at `frame`, parameterized by frame/length over the polyline."""
    if len(waypoints) == 1:
        return float(waypoints[0][0]), float(waypoints[0][1])
    u = frame / length * (len(waypoints) - 1)
    seg = min(int(u), len(waypoints) - 2)
    f = u - seg
    (x0, y0), (x1, y1) = waypoints[seg], waypoints[seg + 1]
    return x0 + f * (x1 - x0), y0 + f * (y1 - y0)


def _interp_scale(keyframes, frame):
    if not keyframes:
        return 1.0
    if frame <= keyframes[0][0]:
        return float(keyframes[0][1])
    for (f0, s0), (f1, s1) in zip(keyframes, keyframes[1:]):
        if frame <= f1:
            return s0 + (s1 - s0) * (frame - f0) / (f1 - f0)
    return float(keyframes[-1][1])


def _texture(seed, w, h, color_range=(30, 226)):
    """Blocky random color texture, deterministic in (seed, w, h)."""
    rng = np.random.default_rng(seed)
    bw = (w + _PATCH - 1) // _PATCH
    bh = (h + _PATCH - 1) // _PATCH
    blocks = rng.integers(color_range[0], color_range[1] + 1,
                          size=(bh, bw, 3))
    return np.repeat(np.repeat(blocks, _PATCH, axis=0), _PATCH,
                     axis=1)[:h, :w].astype(np.float32)


def _scaled_texture(base, w, h):
    """Nearest-neighbor resample of a base texture to w x h."""
    ys = np.minimum((np.arange(h) * base.shape[0] // h), base.shape[0] - 1)
    xs = np.minimum((np.arange(w) * base.shape[1] // w), base.shape[1] - 1)
    return base[ys][:, xs]


def _object_rect(obj: ObjectSpec, frame, length, frame_size, clip):
    x, y = _interp_waypoints(obj.waypoints, frame, length)
    scale = _interp_scale(obj.scale_keyframes, frame)
    w = max(4, int(round(obj.size[0] * scale)))
    h = max(4, int(round(obj.size[1] * scale)))
    xi, yi = int(round(x)), int(round(y))
    fw, fh = frame_size
    if clip:
        xi = min(max(xi, 0), fw - w)
        yi = min(max(yi, 0), fh - h)
    elif xi < 0 or yi < 0 or xi + w > fw or yi + h > fh:
        raise ValueError(
            f"object leaves the frame at t={frame}: ({xi},{yi},{w},{h})")
    return xi, yi, w, h


def _paste(canvas, rect, patch):
    x, y, w, h = rect
    canvas[y:y + h, x:x + w] = patch[:h, :w]


def generate(spec: SceneSpec):
    """Render the scene: (uint8 frames, exact gt boxes, challenge tags)."""
    fw, fh = spec.frame_size
    bg = _texture((spec.seed, 0xB6), fw, fh, spec.background_range)
    target_tex = _texture((spec.target.texture_seed, 0x7A), *spec.target.size,
                          spec.target.color_range)
    distractor_tex = [
        _texture((d.texture_seed, 0x7A), *d.size, d.color_range)
        for d in spec.distractors]
    jitter_rng = np.random.default_rng((spec.seed, 0x11))
    jitter = 1.0 + jitter_rng.uniform(-_JITTER, _JITTER, size=spec.length)
    noise_rng = np.random.default_rng((spec.seed, 0x22))

    frames = []
    gts = []
    for t in range(spec.length):
        canvas = bg.copy()
        for d, tex in zip(spec.distractors, distractor_tex):
            rect = _object_rect(d, t, spec.length, spec.frame_size, clip=True)
            _paste(canvas, rect, _scaled_texture(tex, rect[2], rect[3]))
        rect = _object_rect(spec.target, t, spec.length, spec.frame_size,
                            clip=False)
        _paste(canvas, rect, _scaled_texture(target_tex, rect[2], rect[3]))
        gts.append(BBox(*map(float, rect)))
        for occ in spec.occluders:
            if occ.start <= t < occ.end:
                span = max(occ.end - occ.start, 1)
                ox, oy = _interp_waypoints(occ.waypoints, t - occ.start, span)
                ow, oh = occ.size
                oxi = min(max(int(round(ox)), 0), fw - ow)
                oyi = min(max(int(round(oy)), 0), fh - oh)
                canvas[oyi:oyi + oh, oxi:oxi + ow] = occ.color
        canvas = canvas * jitter[t]
        if spec.noise_std > 0:
            canvas = canvas + noise_rng.normal(0.0, spec.noise_std,
                                               size=canvas.shape)
        frames.append(np.clip(canvas, 0, 255).astype(np.uint8))
    return frames, gts, scene_tags(spec)


def scene_tags(spec: SceneSpec):
    """OTB-style challenge tags implied by the enabled scene mechanisms."""
    tags = []
    if spec.target.scale_keyframes:
        tags.append("SV")
    if spec.occluders:
        tags.append("OCC")
    if spec.distractors:
        tags.append("BC")
    return tags


PRESET_NAMES = ("easy_translation", "distractor", "occlusion", "scale_change")


def preset(name: str, seed: int = 0) -> SceneSpec:
    """Fixed scene specs exercising one challenge mechanism each."""
    target = ObjectSpec(size=(64, 64), waypoints=[(30, 88), (148, 88)],
                        texture_seed=(seed, 1))
    if name == "easy_translation":
        return SceneSpec(target=target, seed=seed)
    if name == "distractor":
        # Twin shares the target's texture seed but renders at its own
        # size and a slightly shifted palette: target-like against the
        # dark backdrop yet not pixel-identical, so telling them apart
        # is hard but learnable.  After a quiet opening it bobs through
        # the target's row three times (center offset ~16px), each pass
        # overlapping heavily without ever coinciding.
        twin = ObjectSpec(size=(56, 72),
                          waypoints=[(130, 176), (130, 176), (130, 70),
                                     (130, 150), (130, 60)],
                          texture_seed=(seed, 1), color_range=(90, 225))
        return SceneSpec(target=target, distractors=[twin], seed=seed)
    if name == "occlusion":
        slow = ObjectSpec(size=(64, 64), waypoints=[(60, 88), (150, 88)],
                          texture_seed=(seed, 1))
        positions = [_interp_waypoints(slow.waypoints, t, DEFAULT_LENGTH)
                     for t in range(25, 35)]
        # A 56x88 bar riding 8px into the target covers 7/8 of its area.
        bar = OccluderSpec(size=(56, 88),
                           waypoints=[(positions[0][0] + 8, 76),
                                      (positions[-1][0] + 8, 76)],
                           start=25, end=35)
        return SceneSpec(target=slow, occluders=[bar], seed=seed)
    if name == "scale_change":
        scaled = ObjectSpec(size=(64, 64), waypoints=[(40, 88), (216, 88)],
                            texture_seed=(seed, 1),
                            scale_keyframes=[(0, 1.0), (30, 1.4), (59, 0.8)])
        return SceneSpec(target=scaled, seed=seed)
    raise ValueError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# PPM + ground-truth files (the evaluation loader's on-disk layout)
# ---------------------------------------------------------------------------

def write_ppm(path, image) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def save_sequence(out_dir, frames, gts, tags=()) -> None:
    """Persist frames + gt in the benchmark directory layout (1-based gt)."""
    img_dir = os.path.join(out_dir, "img")
    os.makedirs(img_dir, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(os.path.join(img_dir, f"{i + 1:04d}.ppm"), frame)
    with open(os.path.join(out_dir, "groundtruth_rect.txt"), "w") as fh:
        for gt in gts:
            fh.write(f"{gt.x + 1:.2f},{gt.y + 1:.2f},{gt.w:.2f},{gt.h:.2f}\n")
    if tags:
        with open(os.path.join(out_dir, "attributes.txt"), "w") as fh:
            fh.write(",".join(tags) + "\n")
