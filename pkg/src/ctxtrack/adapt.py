"""One-shot channel selection from first-frame candidates.

A single 3x3 conv ("selection probe") is trained with cross-entropy on
the first frame's positive and negative region features.  The gradient
of its background-class score w.r.t. each input channel, averaged over
space and over the negative candidates, scores how much that channel
contributes to telling background apart from the target; the top-K
channels by absolute score form a frozen mask applied to every region
feature for the rest of the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .loss import batch_loss_logits

DEFAULT_MASK_K = 420
DA_LEARNING_RATE = 0.003
DA_ITERS = 100
DA_BATCH = (32, 96)  # positives, negatives per step

# Class channel order everywhere in the pipeline: 0 = background, 1 = target.
BACKGROUND_CLASS = 0
TARGET_CLASS = 1

_SGD_MOMENTUM = 0.9
_SGD_WEIGHT_DECAY = 5e-4


@dataclass
class ConvDaWeights:
    kernel: np.ndarray  # 2 x C x 3 x 3
    bias: np.ndarray    # 2

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[0] != 2 \
                or self.kernel.shape[2:] != (3, 3):
            raise nn.ShapeMismatchError(
                f"selection-probe kernel must be 2xCx3x3, got {self.kernel.shape}")
        if self.bias.shape != (2,):
            raise nn.ShapeMismatchError(
                f"selection-probe bias must have shape (2,), got {self.bias.shape}")
        if not (np.all(np.isfinite(self.kernel))
                and np.all(np.isfinite(self.bias))):
            raise ValueError("selection-probe weights contain non-finite values")


@dataclass
class ChannelMask:
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1 or len(self.indices) == 0:
            raise ValueError("mask needs at least one channel index")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("mask indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)


@dataclass
class DaTrainResult:
    weights: ConvDaWeights
    loss_curve: list = field(default_factory=list)


def _probe_logits(features, weights: ConvDaWeights):
    """Spatial mean of the probe's 2-channel response -> N x 2 logits."""
    resp = nn.conv2d(features, weights.kernel, weights.bias, padding=1)
    return nn.global_avg_pool(resp), resp.shape[2:]


def train_conv_da(features, labels, lr=DA_LEARNING_RATE, iters=DA_ITERS,
                  seed=0) -> DaTrainResult:
    """Train the selection probe with cross-entropy SGD on region features.

    `features` is a list/array of CxHxW region features, `labels` the
    matching 0/1 class per feature.  Requires both classes present.
    """
    feats = np.stack([np.asarray(f, dtype=np.float32) for f in features])
    labels = np.asarray(labels)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise ValueError("selection-probe training needs both classes")

    rng = np.random.default_rng(seed)
    c = feats.shape[1]
    kernel = rng.normal(0.0, 0.01, size=(2, c, 3, 3)).astype(np.float32)
    bias = np.zeros(2, dtype=np.float32)
    vel_k = np.zeros_like(kernel)
    vel_b = np.zeros_like(bias)
    cfg = nn.SgdConfig(learning_rate=lr, momentum=_SGD_MOMENTUM,
                       weight_decay=_SGD_WEIGHT_DECAY)

    n_pos, n_neg = DA_BATCH
    curve = []
    for _ in range(iters):
        batch_idx = np.concatenate([rng.choice(pos_idx, n_pos, replace=True),
                                    rng.choice(neg_idx, n_neg, replace=True)])
        x = feats[batch_idx]
        y = labels[batch_idx]
        weights = ConvDaWeights(kernel=kernel, bias=bias)
        logits, spatial = _probe_logits(x, weights)
        mean_loss, grad_logits = batch_loss_logits(logits, y, kind="ce")
        curve.append(mean_loss)
        grad_resp = nn.global_avg_pool_backward(
            grad_logits.astype(np.float32), spatial)
        _, gk, gb = nn.conv2d_backward(x, kernel, grad_resp, padding=1,
                                       need_input_grad=False)
        if lr > 0:
            nn.sgd_step(kernel, gk.astype(np.float32), vel_k, cfg)
            nn.sgd_step(bias, gb.astype(np.float32), vel_b, cfg)
    return DaTrainResult(weights=ConvDaWeights(kernel=kernel, bias=bias),
                         loss_curve=curve)


def probe_scores(features, weights: ConvDaWeights):
    """Class probabilities of region features under the trained probe."""
    feats = np.stack([np.asarray(f, dtype=np.float32) for f in features])
    logits, _ = _probe_logits(feats, weights)
    return nn.softmax2(logits)


def channel_importance(weights: ConvDaWeights, neg_features,
                       source: str = "score",
                       signed: bool = False) -> np.ndarray:
    """Spatially averaged input gradient per channel over the negatives.

    `source` picks what is differentiated: the background-class logit
    ("score", default) or the per-candidate cross-entropy loss ("loss").
    Importance is |delta| unless `signed` asks for the raw average.
    """
    if source not in ("score", "loss"):
        raise ValueError(f"importance source must be 'score' or 'loss', "
                         f"got {source!r}")
    feats = np.stack([np.asarray(f, dtype=np.float32) for f in neg_features])
    if feats.shape[0] == 0:
        raise ValueError("need at least one negative feature")
    n = feats.shape[0]
    logits, spatial = _probe_logits(feats, weights)
    if source == "score":
        grad_logits = np.zeros((n, 2), dtype=np.float32)
        grad_logits[:, BACKGROUND_CLASS] = 1.0
    else:
        _, grad_logits = batch_loss_logits(logits, np.zeros(n, dtype=int),
                                           kind="ce")
        grad_logits = (grad_logits * n).astype(np.float32)  # per-candidate
    grad_resp = nn.global_avg_pool_backward(grad_logits, spatial)
    grad_in, _, _ = nn.conv2d_backward(feats, weights.kernel, grad_resp,
                                       padding=1)
    # Per-candidate spatial mean, then equal-weight average over candidates.
    delta = grad_in.mean(axis=(2, 3)).mean(axis=0)
    return delta if signed else np.abs(delta)


def select_channels(importance, k: int = DEFAULT_MASK_K) -> ChannelMask:
    """Indices of the k largest importances; ties go to the lower index."""
    importance = np.asarray(importance)
    if k > importance.size:
        raise ValueError(f"cannot select {k} of {importance.size} channels")
    if k < 1:
        raise ValueError("k must be positive")
    # Stable sort on descending value keeps lower indices first on ties.
    order = np.argsort(-importance, kind="stable")
    return ChannelMask(indices=np.sort(order[:k]))


def apply_mask(feature, mask: ChannelMask) -> np.ndarray:
    feature = np.asarray(feature)
    if mask.indices.max() >= feature.shape[0]:
        raise IndexError(f"mask index {mask.indices.max()} out of range for "
                         f"{feature.shape[0]} channels")
    return feature[mask.indices]
