"""Finite-difference verification of every analytic backward pass.

Each check draws seeded random instances, compares the analytic
gradient against central differences in float64, and reports the worst
normalized error.  Non-smooth ops (relu, maxpool) draw inputs with
gaps wider than the probe step so the differences never straddle a
kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backbone, nn
from .head import HeadWeights
from .loss import CsLossParams, batch_loss_logits, cs_loss, cs_loss_grad
from .sampling import BBox

DEFAULT_INSTANCES = 100
REL_TOLERANCE = 1e-3
FD_EPS = 1e-3


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float = REL_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err "
                f"{self.max_rel_error:.2e} over {self.instances} instances "
                f"(tol {self.tolerance:.0e})")


def _rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale


def _well_separated(rng, shape, gap=0.05):
    """Values with pairwise gaps well above the probe step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + gap).reshape(shape)


def _check_conv2d(rng):
    stride = int(rng.integers(1, 3))
    dilation = int(rng.choice([1, 2, 3]))
    x = rng.normal(size=(1, 2, 8, 8))
    k = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    g = np.ones(nn.conv2d(x, k, b, stride, dilation).shape)

    gx, gk, gb = nn.conv2d_backward(x, k, g, stride, dilation)
    errs = [
        _rel_error(gx, nn.numeric_grad(
            lambda v: float(nn.conv2d(v, k, b, stride, dilation).sum()),
            x, FD_EPS)),
        _rel_error(gk, nn.numeric_grad(
            lambda v: float(nn.conv2d(x, v, b, stride, dilation).sum()),
            k, FD_EPS)),
        _rel_error(gb, nn.numeric_grad(
            lambda v: float(nn.conv2d(x, k, v, stride, dilation).sum()),
            b, FD_EPS)),
    ]
    return max(errs)


def _check_relu(rng):
    x = rng.normal(size=(3, 5))
    x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + x, x)  # avoid the kink
    g = rng.normal(size=x.shape)
    analytic = nn.relu_backward(x, g)
    numeric = nn.numeric_grad(lambda v: float((nn.relu(v) * g).sum()), x,
                              FD_EPS)
    return _rel_error(analytic, numeric)


def _check_lrn(rng):
    x = rng.normal(size=(1, 6, 4, 4))
    g = rng.normal(size=x.shape)
    params = dict(size=5, k=2.0, alpha=float(rng.uniform(0.1, 1.0)),
                  beta=0.75)
    analytic = nn.lrn_backward(x, g, **params)
    numeric = nn.numeric_grad(lambda v: float((nn.lrn(v, **params) * g).sum()),
                              x, FD_EPS)
    return _rel_error(analytic, numeric)


def _check_maxpool(rng):
    x = _well_separated(rng, (1, 2, 6, 6))
    g = rng.normal(size=(1, 2, 2, 2))
    analytic = nn.maxpool2d_backward(x, g, 3, 2)
    numeric = nn.numeric_grad(lambda v: float((nn.maxpool2d(v, 3, 2) * g).sum()),
                              x, FD_EPS)
    return _rel_error(analytic, numeric)


def _check_softmax2(rng):
    z = rng.normal(scale=2.0, size=(4, 2))
    g = rng.normal(size=z.shape)
    analytic = nn.softmax2_backward(nn.softmax2(z), g)
    numeric = nn.numeric_grad(lambda v: float((nn.softmax2(v) * g).sum()), z,
                              FD_EPS)
    return _rel_error(analytic, numeric)


def _check_gap(rng):
    x = rng.normal(size=(3, 4, 5))
    g = rng.normal(size=3)
    analytic = nn.global_avg_pool_backward(g, (4, 5))
    numeric = nn.numeric_grad(
        lambda v: float((nn.global_avg_pool(v) * g).sum()), x, FD_EPS)
    return _rel_error(analytic, numeric)


def _check_roi_align(rng):
    t = rng.normal(size=(2, 6, 7))
    box = BBox(float(rng.uniform(38, 55)), float(rng.uniform(38, 50)),
               float(rng.uniform(12, 35)), float(rng.uniform(12, 30)))
    g = rng.normal(size=(2, 7, 7))
    fm = backbone.FeatureMap(tensor=t[None])
    analytic = backbone.roi_align_backward(fm, box, g)

    def f(v):
        return float((backbone.roi_align(
            backbone.FeatureMap(tensor=v[None]), box) * g).sum())

    return _rel_error(analytic, nn.numeric_grad(f, t, FD_EPS))


def _loss_checker(kind):
    def check(rng):
        p = rng.uniform(0.05, 0.95, size=12)
        y = rng.integers(0, 2, size=12)
        from .loss import batch_loss
        params = CsLossParams()
        _, grads = batch_loss(p, y, kind=kind, params=params)

        def f(v):
            return batch_loss(v, y, kind=kind, params=params)[0]

        return _rel_error(grads, nn.numeric_grad(f, p, 1e-5))

    return check


def _check_cs_loss_scalar(rng):
    p = float(rng.uniform(0.05, 0.95))
    y = int(rng.integers(0, 2))
    analytic = float(cs_loss_grad(p, y))
    numeric = nn.numeric_grad(
        lambda v: float(cs_loss(float(v[0]), y)), np.array([p]), 1e-5)[0]
    return _rel_error(np.array([analytic]), np.array([numeric]))


def _check_head(rng):
    from .head import _backward, _forward

    k, hidden = 4, 6
    # Redraw until no relu pre-activation sits within the probe step of
    # its kink, where central differences are meaningless.
    for _ in range(50):
        w = HeadWeights(
            conv4_kernel=rng.normal(0, 0.4, (hidden, k, 3, 1)),
            conv4_bias=rng.normal(0, 0.4, hidden),
            conv5_kernel=rng.normal(0, 0.4, (hidden, hidden, 1, 3)),
            conv5_bias=rng.normal(0, 0.4, hidden),
            conv6_kernel=rng.normal(0, 0.4, (2, hidden, 1, 1)),
            conv6_bias=rng.normal(0, 0.4, 2))
        feats = rng.normal(size=(2, k, 7, 7))
        labels = rng.integers(0, 2, size=2)
        _, logits, cache = _forward(feats, w)
        _, z4, _, z5, _, _ = cache
        if min(np.abs(z4).min(), np.abs(z5).min()) > 1e-5:
            break

    _, grad_logits = batch_loss_logits(logits, labels, kind="cs")
    gx, _ = _backward(grad_logits, cache, w, need_input=True)

    def f(v):
        _, lg, _ = _forward(v, w)
        return batch_loss_logits(lg, labels, kind="cs")[0]

    return _rel_error(gx, nn.numeric_grad(f, feats, 1e-6))


CHECKS = {
    "conv2d": _check_conv2d,
    "relu": _check_relu,
    "lrn": _check_lrn,
    "maxpool2d": _check_maxpool,
    "softmax2": _check_softmax2,
    "global_avg_pool": _check_gap,
    "roi_align": _check_roi_align,
    "loss_ce": _loss_checker("ce"),
    "loss_focal": _loss_checker("focal"),
    "loss_cs": _loss_checker("cs"),
    "loss_cs_scalar": _check_cs_loss_scalar,
    "head_composition": _check_head,
}


def run_checks(seed=0, instances=DEFAULT_INSTANCES, names=None):
    """Run every registered check; returns results plus elapsed seconds."""
    results = []
    start = time.monotonic()
    for name, check in CHECKS.items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng((seed, hash(name) & 0xFFFF, i))
            worst = max(worst, check(rng))
        results.append(CheckResult(name=name, instances=instances,
                                   max_rel_error=worst))
    return results, time.monotonic() - start
