"""One-pass evaluation: sequence ingestion, precision/success curves,
and the two headline scores (center-error rate at 20px, success AUC).

Conventions pinned here and in the tests, since mixing them silently
shifts scores by one threshold bin: precision counts center error <= t
over the 51-point grid 0..50; success counts IoU strictly > t over the
21-point grid 0, 0.05, .., 1.0; AUC is the plain mean of the 21 rates.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .sampling import BBox, iou
from .synth import read_ppm

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0
DP_REFERENCE_PIXELS = 20.0

# The benchmark's challenge vocabulary; anything else in an attribute
# file is rejected as a typo.
KNOWN_ATTRIBUTES = frozenset(
    ["IV", "SV", "OCC", "DEF", "MB", "FM", "IPR", "OPR", "OV", "BC", "LR"])


class SequenceFormatError(ValueError):
    """On-disk sequence data violates the expected layout."""


@dataclass
class SequenceRecord:
    name: str
    frame_paths: list
    gt_boxes: list
    attributes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frame_paths) != len(self.gt_boxes):
            raise SequenceFormatError(
                f"{self.name}: {len(self.frame_paths)} frames but "
                f"{len(self.gt_boxes)} ground-truth boxes")
        if not self.frame_paths:
            raise SequenceFormatError(f"{self.name}: empty sequence")


@dataclass
class CurvePoints:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.thresholds.shape != self.values.shape:
            raise ValueError("thresholds and values must have equal lengths")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("curve values must lie in [0, 1]")


def _parse_gt_line(line: str, lineno: int, path) -> BBox:
    parts = [p for p in re.split(r"[,\t ]+", line.strip()) if p]
    if len(parts) != 4:
        raise SequenceFormatError(
            f"{path}:{lineno}: expected 4 fields, got {len(parts)}: {line!r}")
    try:
        x, y, w, h = map(float, parts)
    except ValueError as exc:
        raise SequenceFormatError(f"{path}:{lineno}: {exc}") from exc
    # Stored 1-based; internal coordinates are 0-based.
    return BBox(x - 1.0, y - 1.0, w, h)


def load_otb_sequence(seq_dir) -> SequenceRecord:
    """Read an img/ + groundtruth_rect.txt sequence directory."""
    seq_dir = os.fspath(seq_dir)
    img_dir = os.path.join(seq_dir, "img")
    gt_path = os.path.join(seq_dir, "groundtruth_rect.txt")
    if not os.path.isdir(img_dir):
        raise SequenceFormatError(f"{seq_dir}: missing img/ directory")
    if not os.path.isfile(gt_path):
        raise SequenceFormatError(f"{seq_dir}: missing groundtruth_rect.txt")
    frames = sorted(
        os.path.join(img_dir, name) for name in os.listdir(img_dir)
        if name.lower().endswith((".ppm", ".jpg", ".jpeg", ".png", ".bmp")))
    with open(gt_path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise SequenceFormatError(f"{gt_path}: no ground-truth lines")
    boxes = [_parse_gt_line(ln, i + 1, gt_path) for i, ln in enumerate(lines)]
    attributes = []
    attr_path = os.path.join(seq_dir, "attributes.txt")
    if os.path.isfile(attr_path):
        raw = re.split(r"[,\s]+", open(attr_path).read().strip())
        attributes = [a for a in raw if a]
        unknown = set(attributes) - KNOWN_ATTRIBUTES
        if unknown:
            raise SequenceFormatError(
                f"{attr_path}: unknown attribute tags {sorted(unknown)}")
    return SequenceRecord(name=os.path.basename(os.path.abspath(seq_dir)),
                          frame_paths=frames, gt_boxes=boxes,
                          attributes=attributes)


def load_frame(path) -> np.ndarray:
    """Decode one frame to HxWx3 uint8 (PPM natively, else via Pillow)."""
    if os.fspath(path).lower().endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


# ---------------------------------------------------------------------------
# Curves and scores
# ---------------------------------------------------------------------------

def _check_lengths(run_boxes, gt_boxes):
    if len(run_boxes) != len(gt_boxes):
        raise ValueError(f"run has {len(run_boxes)} boxes but ground truth "
                         f"has {len(gt_boxes)}")
    if not len(run_boxes):
        raise ValueError("empty run")


def center_errors(run_boxes, gt_boxes) -> np.ndarray:
    _check_lengths(run_boxes, gt_boxes)
    return np.array([np.hypot(a.cx - b.cx, a.cy - b.cy)
                     for a, b in zip(run_boxes, gt_boxes)])


def overlaps(run_boxes, gt_boxes) -> np.ndarray:
    _check_lengths(run_boxes, gt_boxes)
    return np.array([iou(a, b) for a, b in zip(run_boxes, gt_boxes)])


def precision_curve(run_boxes, gt_boxes) -> CurvePoints:
    errors = center_errors(run_boxes, gt_boxes)
    values = [float(np.mean(errors <= t)) for t in PRECISION_THRESHOLDS]
    return CurvePoints(thresholds=PRECISION_THRESHOLDS, values=values)


def dp_at(curve: CurvePoints, pixels: float = DP_REFERENCE_PIXELS) -> float:
    idx = np.flatnonzero(curve.thresholds == pixels)
    if len(idx) == 0:
        raise ValueError(f"threshold {pixels} not on the curve grid")
    return float(curve.values[idx[0]])


def success_curve(run_boxes, gt_boxes) -> CurvePoints:
    ious = overlaps(run_boxes, gt_boxes)
    values = [float(np.mean(ious > t)) for t in SUCCESS_THRESHOLDS]
    return CurvePoints(thresholds=SUCCESS_THRESHOLDS, values=values)


def auc(curve: CurvePoints) -> float:
    return float(np.mean(curve.values))


def score_run(run_boxes, gt_boxes) -> dict:
    """Both headline scores plus their curves for one sequence."""
    prec = precision_curve(run_boxes, gt_boxes)
    succ = success_curve(run_boxes, gt_boxes)
    return {"dp20": dp_at(prec), "auc": auc(succ),
            "precision_curve": prec, "success_curve": succ}


def attribute_report(runs: dict, records: dict) -> dict:
    """Mean DP/AUC per challenge attribute over member sequences."""
    per_attr: dict = {}
    for name, run_boxes in runs.items():
        if name not in records:
            raise KeyError(f"no sequence record for run {name!r}")
        record = records[name]
        scores = score_run(run_boxes, record.gt_boxes)
        for attr in record.attributes:
            per_attr.setdefault(attr, []).append(scores)
    return {attr: {"dp20": float(np.mean([s["dp20"] for s in members])),
                   "auc": float(np.mean([s["auc"] for s in members])),
                   "sequences": len(members)}
            for attr, members in sorted(per_attr.items())}


def ope_run(cfg, record: SequenceRecord, weights) -> tuple[list, dict]:
    """One-pass evaluation: init from frame-1 gt, track once, score."""
    from .tracker import track_sequence
    frames = (load_frame(p) for p in record.frame_paths)
    results = track_sequence(frames, record.gt_boxes[0], cfg, weights)
    scores = score_run([r.box for r in results], record.gt_boxes)
    return results, scores
