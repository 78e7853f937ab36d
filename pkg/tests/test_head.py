import numpy as np
import pytest

from ctxtrack import nn
from ctxtrack.head import (
    HeadWeights,
    TrainSample,
    finetune,
    head_forward,
    head_scores,
    init_head,
)
from ctxtrack.loss import batch_loss_logits


K = 12  # small mask size for tests


def toy_samples(n_per_class=40, k=K, seed=0, signal=100.0, noise=10.0):
    """Separable non-negative features at realistic conv-output magnitude."""
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    for y in (1, 0):
        hot = 0 if y == 1 else 1
        for i in range(n_per_class):
            f = rng.normal(0.0, noise, size=(k, 7, 7)).astype(np.float32)
            f[hot] += signal
            f = np.maximum(f, 0.0)
            sample = TrainSample(feature=f, label=y, frame_index=1)
            (pos if y == 1 else neg).append(sample)
    return pos, neg


class TestInitHead:
    def test_same_seed_identical(self):
        a = init_head(3, K)
        b = init_head(3, K)
        assert a.conv4_kernel.tobytes() == b.conv4_kernel.tobytes()
        assert a.conv6_kernel.tobytes() == b.conv6_kernel.tobytes()

    def test_different_seeds_differ(self):
        assert init_head(3, K).conv4_kernel.tobytes() != \
            init_head(4, K).conv4_kernel.tobytes()

    def test_init_std(self):
        w = init_head(0, 420)
        std = float(w.conv4_kernel.std())
        assert abs(std - 0.01) / 0.01 < 0.2
        assert np.all(w.conv4_bias == 0)

    def test_shapes(self):
        w = init_head(0, K, hidden=32)
        assert w.conv4_kernel.shape == (32, K, 3, 1)
        assert w.conv5_kernel.shape == (32, 32, 1, 3)
        assert w.conv6_kernel.shape == (2, 32, 1, 1)


class TestHeadForward:
    def test_zero_weights_give_half(self):
        w = init_head(0, K)
        for arr in (w.conv4_kernel, w.conv5_kernel, w.conv6_kernel):
            arr[...] = 0.0
        f_pos, f_neg, logits = head_forward(np.ones((K, 7, 7)), w)
        assert f_pos == pytest.approx(0.5)
        assert f_neg == pytest.approx(0.5)
        np.testing.assert_allclose(logits, [0.0, 0.0])

    def test_scores_in_unit_interval_and_sum_to_one(self):
        rng = np.random.default_rng(1)
        w = init_head(1, K)
        for _ in range(20):
            f_pos, f_neg, _ = head_forward(
                rng.normal(size=(K, 7, 7)).astype(np.float32), w)
            assert 0.0 < f_pos < 1.0
            assert f_pos + f_neg == pytest.approx(1.0)

    def test_conv6_doubling_scales_logits_preserves_order(self):
        rng = np.random.default_rng(2)
        w = init_head(2, K)
        feats = rng.normal(size=(16, K, 7, 7)).astype(np.float32)
        _, logits = head_scores(feats, w)
        w2 = w.copy()
        w2.conv6_kernel *= 2.0
        w2.conv6_bias *= 2.0
        probs2, logits2 = head_scores(feats, w2)
        np.testing.assert_allclose(logits2, logits * 2.0, rtol=1e-4)
        assert np.argmax(probs2[:, 1]) == np.argmax(
            nn.softmax2(logits)[:, 1])

    def test_wrong_channel_count(self):
        w = init_head(0, K)
        with pytest.raises(nn.ShapeMismatchError):
            head_forward(np.zeros((K + 1, 7, 7)), w)

    def test_deterministic(self):
        w = init_head(5, K)
        f = np.random.default_rng(3).normal(size=(K, 7, 7)).astype(np.float32)
        a_pos, a_neg, a_logits = head_forward(f, w)
        b_pos, b_neg, b_logits = head_forward(f, w)
        assert a_pos == b_pos and a_neg == b_neg
        np.testing.assert_array_equal(a_logits, b_logits)


def wide_head(rng, k=4, hidden=6):
    """Random head at O(1) weight scale so gradients clear the fd noise floor."""
    def w(*shape):
        return rng.normal(0.0, 0.4, size=shape)

    return HeadWeights(conv4_kernel=w(hidden, k, 3, 1), conv4_bias=w(hidden),
                       conv5_kernel=w(hidden, hidden, 1, 3),
                       conv5_bias=w(hidden),
                       conv6_kernel=w(2, hidden, 1, 1), conv6_bias=w(2))


class TestHeadGradient:
    def test_full_head_matches_numeric(self):
        rng = np.random.default_rng(4)
        w = wide_head(rng)
        feats = rng.normal(size=(3, 4, 7, 7))
        labels = np.array([1, 0, 1])

        from ctxtrack.head import _backward, _forward

        _, logits, cache = _forward(feats, w)
        _, grad_logits = batch_loss_logits(logits, labels, kind="cs")
        gx, grads = _backward(grad_logits, cache, w, need_input=True)

        def loss_of_feats(v):
            _, lg, _ = _forward(v, w)
            return batch_loss_logits(lg, labels, kind="cs")[0]

        numeric = nn.numeric_grad(loss_of_feats, feats, eps=1e-4)
        scale = max(np.abs(numeric).max(), 1e-8)
        assert np.abs(gx - numeric).max() / scale < 1e-3

        def loss_of_k5(v):
            w2 = w.copy()
            w2.conv5_kernel[...] = v
            _, lg, _ = _forward(feats, w2)
            return batch_loss_logits(lg, labels, kind="cs")[0]

        numeric_k5 = nn.numeric_grad(loss_of_k5, w.conv5_kernel, eps=1e-4)
        scale = max(np.abs(numeric_k5).max(), 1e-8)
        assert np.abs(grads["conv5_kernel"] - numeric_k5).max() / scale < 1e-3


class TestFinetune:
    def test_zero_lr_keeps_weights(self):
        pos, neg = toy_samples(8)
        w = init_head(0, K)
        w2, _ = finetune(w, pos, neg, iters=3, lr=0.0, seed=0)
        for a, b in zip(w._arrays(), w2._arrays()):
            np.testing.assert_array_equal(a, b)

    def test_does_not_mutate_input_weights(self):
        pos, neg = toy_samples(8)
        w = init_head(0, K)
        before = w.conv5_kernel.copy()
        finetune(w, pos, neg, iters=3, lr=0.01, seed=0)
        np.testing.assert_array_equal(w.conv5_kernel, before)

    def test_separable_reaches_full_accuracy(self):
        pos, neg = toy_samples(40, seed=1)
        w = init_head(1, K, hidden=32)
        w2, _ = finetune(w, pos, neg, iters=50, lr=0.0015, seed=1)
        feats = np.stack([s.feature for s in pos + neg])
        labels = np.array([1] * len(pos) + [0] * len(neg))
        probs, _ = head_scores(feats, w2)
        assert np.array_equal((probs[:, 1] > 0.5).astype(int), labels)

    def test_loss_decreases_on_average(self):
        drops = 0
        for seed in range(10):
            pos, neg = toy_samples(24, seed=seed)
            w = init_head(seed, K, hidden=16)
            _, curve = finetune(w, pos, neg, iters=30, lr=0.0025, seed=seed)
            drops += curve[-1] <= curve[0]
        assert drops >= 9

    def test_conv4_frozen_without_flag(self):
        pos, neg = toy_samples(8)
        w = init_head(2, K)
        w2, _ = finetune(w, pos, neg, iters=3, lr=0.01, train_conv4=False,
                         seed=0)
        np.testing.assert_array_equal(w2.conv4_kernel, w.conv4_kernel)
        assert w2.conv5_kernel.tobytes() != w.conv5_kernel.tobytes()

    def test_empty_class_rejected(self):
        pos, neg = toy_samples(4)
        w = init_head(0, K)
        with pytest.raises(ValueError):
            finetune(w, pos, [], iters=1, lr=0.01)

    def test_seeded_reproducible(self):
        pos, neg = toy_samples(10)
        w = init_head(0, K)
        a, _ = finetune(w, pos, neg, iters=5, lr=0.005, seed=3)
        b, _ = finetune(w, pos, neg, iters=5, lr=0.005, seed=3)
        assert a.conv6_kernel.tobytes() == b.conv6_kernel.tobytes()
