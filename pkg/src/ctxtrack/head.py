"""Online-trained classifier head over masked region features.

Three stacked convs (3x1 -> ReLU -> 1x3 -> ReLU -> 1x1 to two class
maps) whose padded shapes preserve the 7x7 grid, followed by a spatial
mean and a two-class softmax.  The pair of rectangular kernels replaces
the fully connected layers of older two-stage trackers, keeping the
parameter count small enough to fit online from a few hundred samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .loss import CsLossParams, batch_loss_logits

HIDDEN_WIDTH = 256
INIT_STD = 0.01

SGD_MOMENTUM = 0.9
SGD_WEIGHT_DECAY = 5e-4


@dataclass
class HeadWeights:
    conv4_kernel: np.ndarray  # hidden x K x 3 x 1
    conv4_bias: np.ndarray
    conv5_kernel: np.ndarray  # hidden x hidden x 1 x 3
    conv5_bias: np.ndarray
    conv6_kernel: np.ndarray  # 2 x hidden x 1 x 1
    conv6_bias: np.ndarray

    def __post_init__(self):
        if self.conv4_kernel.shape[2:] != (3, 1):
            raise nn.ShapeMismatchError(
                f"conv4 kernel must be ?x?x3x1, got {self.conv4_kernel.shape}")
        if self.conv5_kernel.shape[2:] != (1, 3):
            raise nn.ShapeMismatchError(
                f"conv5 kernel must be ?x?x1x3, got {self.conv5_kernel.shape}")
        if self.conv6_kernel.shape[0] != 2 \
                or self.conv6_kernel.shape[2:] != (1, 1):
            raise nn.ShapeMismatchError(
                f"conv6 kernel must be 2x?x1x1, got {self.conv6_kernel.shape}")

    @property
    def in_channels(self) -> int:
        return self.conv4_kernel.shape[1]

    def copy(self) -> "HeadWeights":
        return HeadWeights(*(arr.copy() for arr in self._arrays()))

    def _arrays(self):
        return (self.conv4_kernel, self.conv4_bias, self.conv5_kernel,
                self.conv5_bias, self.conv6_kernel, self.conv6_bias)


@dataclass
class TrainSample:
    feature: np.ndarray  # K x 7 x 7 masked region feature
    label: int           # 1 positive, 0 negative
    frame_index: int


def init_head(seed, k, hidden: int = HIDDEN_WIDTH) -> HeadWeights:
    """Gaussian init (std 0.01), zero biases, deterministic under seed."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)

    return HeadWeights(
        conv4_kernel=w(hidden, k, 3, 1),
        conv4_bias=np.zeros(hidden, np.float32),
        conv5_kernel=w(hidden, hidden, 1, 3),
        conv5_bias=np.zeros(hidden, np.float32),
        conv6_kernel=w(2, hidden, 1, 1),
        conv6_bias=np.zeros(2, np.float32),
    )


def _forward(features, w: HeadWeights):
    """Batched forward pass keeping the activations needed for backward."""
    x0 = np.ascontiguousarray(features)
    z4 = nn.conv2d(x0, w.conv4_kernel, w.conv4_bias, padding=(1, 0))
    a4 = nn.relu(z4)
    z5 = nn.conv2d(a4, w.conv5_kernel, w.conv5_bias, padding=(0, 1))
    a5 = nn.relu(z5)
    z6 = nn.conv2d(a5, w.conv6_kernel, w.conv6_bias)
    logits = nn.global_avg_pool(z6)
    probs = nn.softmax2(logits)
    cache = (x0, z4, a4, z5, a5, z6.shape[2:])
    return probs, logits, cache


def _backward(grad_logits, cache, w: HeadWeights, need_input=False):
    """Gradients for all head weights (and optionally the input features)."""
    x0, z4, a4, z5, a5, spatial = cache
    g6 = nn.global_avg_pool_backward(grad_logits.astype(np.float32), spatial)
    ga5, gk6, gb6 = nn.conv2d_backward(a5, w.conv6_kernel, g6)
    gz5 = nn.relu_backward(z5, ga5)
    ga4, gk5, gb5 = nn.conv2d_backward(a4, w.conv5_kernel, gz5, padding=(0, 1))
    gz4 = nn.relu_backward(z4, ga4)
    gx, gk4, gb4 = nn.conv2d_backward(x0, w.conv4_kernel, gz4, padding=(1, 0),
                                      need_input_grad=need_input)
    return gx, {"conv4_kernel": gk4, "conv4_bias": gb4,
                "conv5_kernel": gk5, "conv5_bias": gb5,
                "conv6_kernel": gk6, "conv6_bias": gb6}


def head_scores(features, w: HeadWeights):
    """Class probabilities and logits for a batch of NxKx7x7 features."""
    probs, logits, _ = _forward(np.asarray(features), w)
    return probs, logits


def head_forward(feature, w: HeadWeights):
    """Score one KxHxW feature: (positive score, negative score, logits)."""
    feature = np.asarray(feature)
    if feature.shape[0] != w.in_channels:
        raise nn.ShapeMismatchError(
            f"feature has {feature.shape[0]} channels, head expects "
            f"{w.in_channels}")
    probs, logits, _ = _forward(feature[None], w)
    return float(probs[0, 1]), float(probs[0, 0]), logits[0]


def finetune(w: HeadWeights, pos, neg, iters, lr,
             loss_params: CsLossParams = CsLossParams(),
             loss_kind: str = "cs", train_conv4: bool = True,
             batch_pos: int = 32, batch_neg: int = 96,
             seed=0) -> tuple[HeadWeights, list]:
    """SGD fine-tuning on stored samples; returns new weights + loss curve.

    Each step draws `batch_pos`+`batch_neg` samples with replacement.
    conv5/conv6 always train; conv4 only when `train_conv4` is set.
    The input weights are not mutated.
    """
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("fine-tuning needs both positive and negative samples")
    pos_feats = np.stack([np.asarray(s.feature, dtype=np.float32) for s in pos])
    neg_feats = np.stack([np.asarray(s.feature, dtype=np.float32) for s in neg])

    w = w.copy()
    rng = np.random.default_rng(seed)
    cfg = nn.SgdConfig(learning_rate=lr, momentum=SGD_MOMENTUM,
                       weight_decay=SGD_WEIGHT_DECAY)
    trained = ["conv5_kernel", "conv5_bias", "conv6_kernel", "conv6_bias"]
    if train_conv4:
        trained = ["conv4_kernel", "conv4_bias"] + trained
    velocity = {name: np.zeros_like(getattr(w, name)) for name in trained}

    labels = np.concatenate([np.ones(batch_pos, dtype=int),
                             np.zeros(batch_neg, dtype=int)])
    curve = []
    for _ in range(iters):
        pi = rng.integers(0, len(pos_feats), size=batch_pos)
        ni = rng.integers(0, len(neg_feats), size=batch_neg)
        batch = np.concatenate([pos_feats[pi], neg_feats[ni]])
        _, logits, cache = _forward(batch, w)
        mean_loss, grad_logits = batch_loss_logits(logits, labels,
                                                   kind=loss_kind,
                                                   params=loss_params)
        curve.append(mean_loss)
        if lr == 0:
            continue
        _, grads = _backward(grad_logits, cache, w)
        for name in trained:
            nn.sgd_step(getattr(w, name), grads[name].astype(np.float32),
                        velocity[name], cfg)
    return w, curve
