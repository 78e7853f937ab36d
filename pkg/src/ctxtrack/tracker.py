"""Per-sequence tracking state machine.

Frame 1 trains everything: the selection probe picks the channel mask,
the head fine-tunes on 500/5000 labeled candidates, and a ridge box
regressor fits 1000 high-overlap candidates.  Every later frame scores
256 Gaussian candidates on the shared feature map, takes the argmax,
and then either stores fresh training samples (confident frame) or
fine-tunes the head from memory (uncertain frame, or every tau_interval
frames from the long-term store).  Sample features are captured at
collection time so updates replay exact tensors.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import adapt, backbone, nn, sampling
from .adapt import ChannelMask
from .head import HeadWeights, TrainSample, finetune, head_scores, init_head
from .loss import CsLossParams
from .sampling import BBox, SamplerCfg

FULL_BACKBONE_CHANNELS = 512
FULL_MASK_K = adapt.DEFAULT_MASK_K
FULL_HEAD_HIDDEN = 256


class TrackingError(RuntimeError):
    """Tracking cannot continue on this sequence."""


@dataclass
class TrackerConfig:
    tau_short: int = 20
    tau_long: int = 100
    tau_interval: int = 10
    score_threshold: float = 0.5
    first_frame_iters: int = 50
    first_frame_lr: float = 0.0015
    online_iters: int = 10
    online_lr: float = 0.0025
    loss_kind: str = "cs"
    loss_params: CsLossParams = field(default_factory=CsLossParams)
    sampler: SamplerCfg = field(default_factory=SamplerCfg)
    candidates_per_frame: int = 256
    mask_k: int | None = None       # None: scale 420/512 to backbone width
    head_hidden: int | None = None  # None: scale 256/512 to backbone width
    da_lr: float = adapt.DA_LEARNING_RATE
    da_iters: int = adapt.DA_ITERS
    importance_source: str = "score"
    regressor_lambda: float = 1000.0
    regressor_candidates: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.tau_short > self.tau_long:
            raise ValueError("tau_short must not exceed tau_long")
        if min(self.tau_short, self.tau_long, self.tau_interval) < 1:
            raise ValueError("memory horizons must be positive")
        if min(self.first_frame_iters, self.online_iters) < 1 \
                or min(self.first_frame_lr, self.online_lr) <= 0:
            raise ValueError("iteration counts and learning rates must be "
                             "positive")

    def resolve_mask_k(self, channels: int) -> int:
        if self.mask_k is not None:
            k = self.mask_k
        else:
            k = int(round(channels * FULL_MASK_K / FULL_BACKBONE_CHANNELS))
        return max(1, min(k, channels))

    def resolve_head_hidden(self, channels: int) -> int:
        if self.head_hidden is not None:
            return self.head_hidden
        return max(8, int(round(
            channels * FULL_HEAD_HIDDEN / FULL_BACKBONE_CHANNELS)))


def plan_update(success: bool, frame_index: int, tau_interval: int) -> str:
    """Update kind for one frame: short on failure, long on schedule."""
    if not success:
        return "short"
    if frame_index % tau_interval == 0:
        return "long"
    return "none"


class MemoryStore:
    """Bounded short/long admission of successful frames' samples.

    Both stores admit the same frames and evict oldest-first; since
    tau_short <= tau_long the short store is always a suffix (subset) of
    the long one.  Negatives are only ever consumed from the short
    horizon, so they are dropped as soon as a frame leaves it.
    """

    def __init__(self, tau_short: int, tau_long: int):
        if tau_short > tau_long:
            raise ValueError("tau_short must not exceed tau_long")
        self.tau_short = tau_short
        self.tau_long = tau_long
        self.short: deque[int] = deque()
        self.long: deque[int] = deque()
        self._entries: dict[int, tuple[list, list]] = {}

    def admit(self, frame_index: int, pos, neg) -> None:
        self._entries[frame_index] = (list(pos), list(neg))
        self.short.append(frame_index)
        self.long.append(frame_index)
        if len(self.long) > self.tau_long:
            evicted = self.long.popleft()
            del self._entries[evicted]
        if len(self.short) > self.tau_short:
            evicted = self.short.popleft()
            if evicted in self._entries:
                self._entries[evicted] = (self._entries[evicted][0], [])

    def positives(self, frames) -> list:
        return [s for f in frames for s in self._entries[f][0]]

    def negatives(self, frames) -> list:
        return [s for f in frames for s in self._entries[f][1]]

    def training_sets(self, kind: str):
        """(positives, negatives) for a 'short' or 'long' update."""
        if kind == "short":
            return self.positives(self.short), self.negatives(self.short)
        if kind == "long":
            return self.positives(self.long), self.negatives(self.short)
        raise ValueError(f"unknown update kind {kind!r}")

    def check_invariants(self) -> None:
        assert len(self.short) <= self.tau_short
        assert len(self.long) <= self.tau_long
        assert set(self.short) <= set(self.long)
        assert list(self.short) == sorted(self.short)
        assert list(self.long) == sorted(self.long)


@dataclass
class BoxRegressor:
    """Ridge map from flattened masked features to 4 box-transform targets."""
    weights: np.ndarray  # (d+1) x 4, bias folded into the last row
    ridge_lambda: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        x = np.concatenate([features, np.ones((len(features), 1))], axis=1)
        return x @ self.weights


def box_transform_targets(boxes, gt: BBox) -> np.ndarray:
    """R-CNN style (dx, dy, dlog w, dlog h) from each box to the gt."""
    out = np.empty((len(boxes), 4))
    for i, b in enumerate(boxes):
        out[i] = ((gt.cx - b.cx) / b.w, (gt.cy - b.cy) / b.h,
                  np.log(gt.w / b.w), np.log(gt.h / b.h))
    return out


def train_box_regressor(features, boxes, gt: BBox,
                        ridge_lambda: float = 1000.0) -> BoxRegressor:
    """Closed-form ridge regression on box-transform targets."""
    if ridge_lambda <= 0:
        raise ValueError("ridge lambda must be positive")
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 32:
        raise ValueError(f"need at least 32 candidates, got {len(features)}")
    y = box_transform_targets(boxes, gt)
    x = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    n, d = x.shape
    if d > n:
        # Dual form keeps the solve at n x n for wide feature vectors.
        gram = x @ x.T
        gram[np.diag_indices(n)] += ridge_lambda
        weights = x.T @ np.linalg.solve(gram, y)
    else:
        gram = x.T @ x
        gram[np.diag_indices(d)] += ridge_lambda
        weights = np.linalg.solve(gram, x.T @ y)
    return BoxRegressor(weights=weights, ridge_lambda=ridge_lambda)


def apply_regressor(reg: BoxRegressor, feature, box: BBox,
                    frame_size=None) -> BBox:
    """Refine a confident box; exp on the log-extent targets keeps w,h > 0."""
    dx, dy, dw, dh = reg.predict(np.asarray(feature).reshape(1, -1))[0]
    refined = BBox.from_center(box.cx + dx * box.w, box.cy + dy * box.h,
                               box.w * np.exp(dw), box.h * np.exp(dh))
    if frame_size is not None:
        refined = refined.clipped_to(*frame_size)
    return refined


@dataclass
class FrameResult:
    frame: int
    box: BBox
    score: float
    success: bool
    update_kind: str

    def to_record(self) -> dict:
        return {"frame": self.frame, "x": self.box.x, "y": self.box.y,
                "w": self.box.w, "h": self.box.h, "score": self.score,
                "update": self.update_kind}


@dataclass
class TrackerState:
    cfg: TrackerConfig
    weights: backbone.BackboneWeights
    mask: ChannelMask
    head: HeadWeights
    regressor: BoxRegressor
    memory: MemoryStore
    current_box: BBox
    frame_index: int
    importance: np.ndarray
    da_loss_curve: list


def _seed(cfg: TrackerConfig, *stream) -> list:
    return [cfg.seed] + [int(s) for s in stream]


def _roi_features(fm: backbone.FeatureMap, boxes, scale: float,
                  mask: ChannelMask | None = None) -> np.ndarray:
    """Masked pooled features for original-coordinate boxes, NxCx7x7."""
    feats = backbone.roi_align_batch(fm, [b.scaled(scale) for b in boxes])
    if mask is not None:
        feats = feats[:, mask.indices]
    return feats.astype(np.float32, copy=False)


def _samples(features, label: int, frame_index: int) -> list:
    return [TrainSample(feature=f, label=label, frame_index=frame_index)
            for f in features]


def init(frame, gt: BBox, cfg: TrackerConfig,
         weights: backbone.BackboneWeights) -> tuple[TrackerState, FrameResult]:
    """Frame-1 setup: channel mask, first head fit, box regressor, memories."""
    frame = np.asarray(frame)
    frame_size = (frame.shape[1], frame.shape[0])
    image, scale = backbone.preprocess_frame(frame, gt)
    fm = backbone.extract_features(image, weights)

    # Channel selection from wide-radius first-frame candidates.
    da_pos, da_neg = sampling.draw_training_sets(
        gt, "domain_adapt", _seed(cfg, 1, 1), frame_size, cfg.sampler)
    da_feats = _roi_features(fm, da_pos + da_neg, scale)
    da_labels = np.array([1] * len(da_pos) + [0] * len(da_neg))
    da_result = adapt.train_conv_da(da_feats, da_labels, lr=cfg.da_lr,
                                    iters=cfg.da_iters, seed=_seed(cfg, 1, 2))
    importance = adapt.channel_importance(da_result.weights,
                                          da_feats[len(da_pos):],
                                          source=cfg.importance_source)
    mask = adapt.select_channels(importance, cfg.resolve_mask_k(weights.channels))

    # First head fit on the dense first-frame sample set.
    ff_pos, ff_neg = sampling.draw_training_sets(
        gt, "first_frame", _seed(cfg, 1, 3), frame_size, cfg.sampler)
    pos_feats = _roi_features(fm, ff_pos, scale, mask)
    neg_feats = _roi_features(fm, ff_neg, scale, mask)
    head = init_head(_seed(cfg, 1, 4), len(mask),
                     hidden=cfg.resolve_head_hidden(weights.channels))
    head, _ = finetune(
        head, _samples(pos_feats, 1, 1), _samples(neg_feats, 0, 1),
        iters=cfg.first_frame_iters, lr=cfg.first_frame_lr,
        loss_params=cfg.loss_params, loss_kind=cfg.loss_kind,
        train_conv4=True, seed=_seed(cfg, 1, 5))

    # Box regressor on high-overlap candidates.
    reg_boxes = sampling.draw_overlapping(
        gt, cfg.regressor_candidates, 0.6, _seed(cfg, 1, 6), frame_size,
        cfg.sampler)
    reg_feats = _roi_features(fm, reg_boxes, scale, mask)
    regressor = train_box_regressor(reg_feats.reshape(len(reg_boxes), -1),
                                    reg_boxes, gt, cfg.regressor_lambda)

    # Seed both memories with a bounded frame-1 sample set.
    memory = MemoryStore(cfg.tau_short, cfg.tau_long)
    m_pos, m_neg = sampling.draw_training_sets(
        gt, "first_frame_memory", _seed(cfg, 1, 7), frame_size, cfg.sampler)
    memory.admit(1, _samples(_roi_features(fm, m_pos, scale, mask), 1, 1),
                 _samples(_roi_features(fm, m_neg, scale, mask), 0, 1))

    gt_feature = _roi_features(fm, [gt], scale, mask)
    probs, _ = head_scores(gt_feature, head)
    score = float(probs[0, 1])

    state = TrackerState(cfg=cfg, weights=weights, mask=mask, head=head,
                         regressor=regressor, memory=memory, current_box=gt,
                         frame_index=1, importance=importance,
                         da_loss_curve=da_result.loss_curve)
    result = FrameResult(frame=1, box=gt, score=score,
                         success=score >= cfg.score_threshold,
                         update_kind="none")
    return state, result


def step(state: TrackerState, frame) -> FrameResult:
    """Track one frame: score candidates, pick the argmax, update."""
    cfg = state.cfg
    t = state.frame_index + 1
    frame = np.asarray(frame)
    frame_size = (frame.shape[1], frame.shape[0])

    prev = state.current_box.clipped_to(*frame_size)
    image, scale = backbone.preprocess_frame(frame, prev)
    fm = backbone.extract_features(image, state.weights)

    candidates = sampling.sample_candidates(
        prev, cfg.candidates_per_frame, cfg.sampler, _seed(cfg, t, 1),
        frame_size)
    try:
        feats = _roi_features(fm, candidates, scale, state.mask)
    except backbone.RoiOutsideError as exc:
        raise TrackingError(f"frame {t}: candidate set left the feature map "
                            f"({exc})") from exc
    probs, _ = head_scores(feats, state.head)
    best = int(np.argmax(probs[:, 1]))  # lowest index wins ties
    score = float(probs[best, 1])
    success = score >= cfg.score_threshold

    if success:
        refined = apply_regressor(state.regressor, feats[best],
                                  candidates[best], frame_size)
        state.current_box = refined
        s_pos, s_neg = sampling.draw_training_sets(
            refined, "online", _seed(cfg, t, 2), frame_size, cfg.sampler)
        state.memory.admit(
            t, _samples(_roi_features(fm, s_pos, scale, state.mask), 1, t),
            _samples(_roi_features(fm, s_neg, scale, state.mask), 0, t))
    else:
        state.current_box = candidates[best]

    kind = plan_update(success, t, cfg.tau_interval)
    if kind != "none":
        pos, neg = state.memory.training_sets(kind)
        state.head, _ = finetune(
            state.head, pos, neg, iters=cfg.online_iters, lr=cfg.online_lr,
            loss_params=cfg.loss_params, loss_kind=cfg.loss_kind,
            train_conv4=True, seed=_seed(cfg, t, 3))

    state.frame_index = t
    return FrameResult(frame=t, box=state.current_box, score=score,
                       success=success, update_kind=kind)


def track_sequence(frames, gt0: BBox, cfg: TrackerConfig,
                   weights: backbone.BackboneWeights) -> list[FrameResult]:
    """Initialize on the first frame, then step through the rest."""
    iterator = iter(frames)
    try:
        first = next(iterator)
    except StopIteration:
        raise TrackingError("empty sequence") from None
    state, result = init(first, gt0, cfg, weights)
    run = [result]
    for frame in iterator:
        run.append(step(state, frame))
    return run
