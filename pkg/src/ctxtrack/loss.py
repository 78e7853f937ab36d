"""Classification losses for the online updates.

Three variants over the probability assigned to a candidate's true
class: plain cross-entropy, a focal down-weighting of confident
candidates, and the cost-sensitive loss that suppresses easy candidates
through a sigmoid-shaped modulating factor while leaving hard ones
essentially untouched.  All scalars are computed in float64; gradients
are provided both w.r.t. the positive-class probability and w.r.t. raw
2-class logits so the classifier head can train directly on its output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

PROB_CLAMP = 1e-7


@dataclass
class CsLossParams:
    """Hyper-parameters of the cost-sensitive loss (and the focal variant)."""
    alpha: float = 10.0
    beta: float = 0.2
    gamma: float = 2.0
    nu: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.nu <= 0:
            raise ValueError("nu must be positive")


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _sigmoid(t):
    # Overflow-safe in both directions; underflows smoothly to the 0-limit.
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def p_t(p, y):
    """Probability assigned to the true class: p if y=1, else 1-p."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    return np.where(y == 1, p, 1.0 - p)


def ce_loss(p, y):
    return -np.log(_clamp(p_t(p, y)))


def focal_loss(p, y, nu=1.0):
    pt = _clamp(p_t(p, y))
    return -((1.0 - pt) ** nu) * np.log(pt)


def modulating_factor(pt, params: CsLossParams):
    """Sigmoid multiplier in (0,1): ~1 for hard candidates, ->0 for easy ones."""
    pt = np.asarray(pt, dtype=np.float64)
    return _sigmoid(params.alpha * ((1.0 - pt) ** params.gamma - params.beta))


def cs_loss(p, y, params: CsLossParams = CsLossParams()):
    pt = _clamp(p_t(p, y))
    return -np.log(pt) * modulating_factor(pt, params)


def cs_loss_grad(p, y, params: CsLossParams = CsLossParams()):
    """d(cs_loss)/dp, analytic through the clamp-free interior."""
    return _loss_grad_p("cs", p, y, params)


def _grad_wrt_pt(kind, pt, params: CsLossParams):
    pt = np.asarray(pt, dtype=np.float64)
    if kind == "ce":
        return -1.0 / pt
    if kind == "focal":
        nu = params.nu
        return ((1.0 - pt) ** (nu - 1.0)) * (nu * np.log(pt) - (1.0 - pt) / pt)
    if kind == "cs":
        m = modulating_factor(pt, params)
        dm = m * (1.0 - m) * params.alpha * (-params.gamma) * \
            (1.0 - pt) ** (params.gamma - 1.0)
        return -m / pt - np.log(pt) * dm
    raise ValueError(f"unknown loss kind {kind!r}")


def _loss_grad_p(kind, p, y, params):
    pt = _clamp(p_t(p, y))
    sign = np.where(np.asarray(y) == 1, 1.0, -1.0)
    return _grad_wrt_pt(kind, pt, params) * sign


_LOSS_FNS = {
    "ce": lambda p, y, params: ce_loss(p, y),
    "focal": lambda p, y, params: focal_loss(p, y, params.nu),
    "cs": cs_loss,
}


def batch_loss(probs, labels, kind="cs", params: CsLossParams = CsLossParams()):
    """Mean loss over a batch plus per-sample d(loss)/dp scaled by 1/batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.size == 0:
        raise ValueError("empty batch")
    if kind not in _LOSS_FNS:
        raise ValueError(f"unknown loss kind {kind!r}")
    values = _LOSS_FNS[kind](probs, labels, params)
    grads = _loss_grad_p(kind, probs, labels, params) / probs.size
    return float(values.mean()), grads


def batch_loss_logits(logits, labels, kind="cs",
                      params: CsLossParams = CsLossParams()):
    """Mean loss on Nx2 logits plus d(loss)/d(logits), softmax composed in.

    Class channel 1 is the positive class.  Composing the probability
    gradient with the softmax Jacobian here avoids re-clamping the
    already-normalized probabilities.
    """
    logits = np.asarray(logits)
    probs = nn.softmax2(logits)
    mean, grad_p = batch_loss(probs[..., 1], labels, kind, params)
    grad_probs = np.zeros_like(probs, dtype=np.float64)
    grad_probs[..., 1] = grad_p
    return mean, nn.softmax2_backward(probs, grad_probs)
