"""Candidate boxes: Gaussian sampling around a target state, IoU
geometry on half-open pixel intervals, and threshold-based labeling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplingExhaustedError(RuntimeError):
    """A labeled-candidate quota could not be met within the attempt budget."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner plus positive extents, in pixels."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x * factor, self.y * factor,
                    self.w * factor, self.h * factor)

    def clipped_to(self, frame_w: float, frame_h: float) -> "BBox":
        """Shift (and if needed shrink) the box so it lies inside the frame."""
        w = min(self.w, frame_w)
        h = min(self.h, frame_h)
        x = min(max(self.x, 0.0), frame_w - w)
        y = min(max(self.y, 0.0), frame_h - h)
        return BBox(x, y, w, h)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # Areas from the same corner arithmetic keep iou(a, a) at exactly 1.
    area_a = ((a.x + a.w) - a.x) * ((a.y + a.h) - a.y)
    area_b = ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y)
    return inter / (area_a + area_b - inter)


@dataclass
class SamplerCfg:
    """Spread of the Gaussian candidate distribution around a target state."""
    trans_sigma_factor: float = 0.6
    scale_sigma: float = 0.5
    scale_base: float = 1.05
    clip_to_frame: bool = True

    def __post_init__(self):
        if self.trans_sigma_factor < 0 or self.scale_sigma < 0:
            raise ValueError("sigma factors must be non-negative")
        if self.scale_base <= 1.0:
            raise ValueError("scale_base must exceed 1")


# Narrow proposal used when rejection-sampling high-overlap positives;
# the wide candidate distribution would accept far too rarely.
_POS_TRANS_FACTOR = 0.1
_POS_SCALE_SIGMA = 0.15

# Per-phase quotas and IoU thresholds: (n_pos, pos_thr, n_neg, neg_thr).
# "first_frame_memory" seeds the bounded memories with online-sized sets
# at first-frame thresholds.
PHASE_QUOTAS = {
    "first_frame": (500, 0.7, 5000, 0.5),
    "online": (50, 0.7, 200, 0.3),
    "domain_adapt": (250, 0.7, 250, 0.5),
    "first_frame_memory": (50, 0.7, 200, 0.5),
}

_MAX_SAMPLE_ROUNDS = 100


def _clip_rows(rows, frame_size):
    fw, fh = frame_size
    w = np.minimum(rows[:, 2], fw)
    h = np.minimum(rows[:, 3], fh)
    x = np.clip(rows[:, 0], 0.0, fw - w)
    y = np.clip(rows[:, 1], 0.0, fh - h)
    return np.stack([x, y, w, h], axis=1)


def _draw_rows(center: BBox, n, rng, trans_factor, scale_sigma, scale_base,
               clip, frame_size):
    """Vectorized Gaussian draw, one (x, y, w, h) row per candidate."""
    sigma = trans_factor * (center.w + center.h) / 2.0
    cx = center.cx + rng.normal(0.0, 1.0, size=n) * sigma
    cy = center.cy + rng.normal(0.0, 1.0, size=n) * sigma
    mult = scale_base ** rng.normal(0.0, scale_sigma, size=n)
    w = center.w * mult
    h = center.h * mult
    rows = np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)
    if clip and frame_size is not None:
        rows = _clip_rows(rows, frame_size)
    return rows


def _iou_rows(rows, gt: BBox):
    ix = (np.minimum(rows[:, 0] + rows[:, 2], gt.x + gt.w)
          - np.maximum(rows[:, 0], gt.x))
    iy = (np.minimum(rows[:, 1] + rows[:, 3], gt.y + gt.h)
          - np.maximum(rows[:, 1], gt.y))
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    return inter / (rows[:, 2] * rows[:, 3] + gt.area - inter)


def _as_boxes(rows):
    return [BBox(*row) for row in rows]


def sample_candidates(center: BBox, n: int, cfg: SamplerCfg, seed,
                      frame_size=None) -> list[BBox]:
    """Draw n candidate boxes from a Gaussian around `center` (seeded)."""
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(seed)
    return _as_boxes(_draw_rows(center, n, rng, cfg.trans_sigma_factor,
                                cfg.scale_sigma, cfg.scale_base,
                                cfg.clip_to_frame, frame_size))


def label_candidates(cands, gt: BBox, pos_thr: float, neg_thr: float):
    """Split candidates by IoU with gt; the band in between is discarded."""
    if pos_thr <= neg_thr:
        raise ValueError("pos_thr must exceed neg_thr")
    pos, neg = [], []
    for c in cands:
        v = iou(c, gt)
        if v > pos_thr:
            pos.append(c)
        elif v < neg_thr:
            neg.append(c)
    return pos, neg


def _uniform_rows(gt: BBox, n, rng, frame_size, scale_sigma, scale_base):
    fw, fh = frame_size
    mult = scale_base ** rng.normal(0.0, scale_sigma, size=n)
    w = np.minimum(gt.w * mult, fw)
    h = np.minimum(gt.h * mult, fh)
    cx = rng.uniform(0.0, 1.0, size=n) * (fw - w) + w / 2.0
    cy = rng.uniform(0.0, 1.0, size=n) * (fh - h) + h / 2.0
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


def draw_training_sets(gt: BBox, phase: str, seed, frame_size,
                       cfg: SamplerCfg = SamplerCfg()):
    """Rejection-sample labeled boxes until the phase's quotas are met.

    Negatives in the domain-adaptation phase are spread twice as wide and
    topped up with uniform whole-frame draws so they cover background the
    target may later cross.
    """
    if phase not in PHASE_QUOTAS:
        raise ValueError(f"unknown phase {phase!r}")
    n_pos, pos_thr, n_neg, neg_thr = PHASE_QUOTAS[phase]
    rng = np.random.default_rng(seed)

    # First-frame and adaptation negatives must also cover background the
    # target may later cross, so they mix wide draws with uniform
    # whole-frame ones; online negatives stay near the target.
    if phase == "domain_adapt":
        neg_trans, uniform_share = 2.0 * cfg.trans_sigma_factor, 0.2
    elif phase == "first_frame":
        neg_trans, uniform_share = 2.0 * cfg.trans_sigma_factor, 0.5
    else:
        neg_trans, uniform_share = cfg.trans_sigma_factor, 0.0

    pos = np.empty((0, 4))
    neg = np.empty((0, 4))
    for _ in range(_MAX_SAMPLE_ROUNDS):
        if len(pos) < n_pos:
            rows = _draw_rows(gt, max(256, 2 * (n_pos - len(pos))), rng,
                              _POS_TRANS_FACTOR, _POS_SCALE_SIGMA,
                              cfg.scale_base, cfg.clip_to_frame, frame_size)
            pos = np.concatenate([pos, rows[_iou_rows(rows, gt) > pos_thr]])
        if len(neg) < n_neg:
            want = max(256, 2 * (n_neg - len(neg)))
            n_uniform = int(round(want * uniform_share))
            rows = _draw_rows(gt, want - n_uniform, rng, neg_trans,
                              cfg.scale_sigma, cfg.scale_base,
                              cfg.clip_to_frame, frame_size)
            if n_uniform:
                rows = np.concatenate([rows, _uniform_rows(
                    gt, n_uniform, rng, frame_size, cfg.scale_sigma,
                    cfg.scale_base)])
            neg = np.concatenate([neg, rows[_iou_rows(rows, gt) < neg_thr]])
        if len(pos) >= n_pos and len(neg) >= n_neg:
            return _as_boxes(pos[:n_pos]), _as_boxes(neg[:n_neg])
    raise SamplingExhaustedError(
        f"could not draw {n_pos}/{n_neg} labeled candidates for phase "
        f"{phase!r} (target {gt} in frame {frame_size})")


def draw_overlapping(gt: BBox, n: int, min_iou: float, seed, frame_size,
                     cfg: SamplerCfg = SamplerCfg()) -> list[BBox]:
    """Rejection-sample n boxes with IoU strictly above `min_iou`."""
    rng = np.random.default_rng(seed)
    # A proposal between the positive and candidate spreads keeps the
    # acceptance rate workable while still covering the overlap band.
    accepted = np.empty((0, 4))
    for _ in range(_MAX_SAMPLE_ROUNDS):
        rows = _draw_rows(gt, max(256, 2 * (n - len(accepted))), rng,
                          0.3, 0.25, cfg.scale_base, cfg.clip_to_frame,
                          frame_size)
        accepted = np.concatenate(
            [accepted, rows[_iou_rows(rows, gt) > min_iou]])
        if len(accepted) >= n:
            return _as_boxes(accepted[:n])
    raise SamplingExhaustedError(
        f"could not draw {n} boxes with IoU > {min_iou} around {gt}")
