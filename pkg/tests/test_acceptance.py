"""Acceptance gate: one test per release criterion, at pinned tolerances.

Run with `pytest -s tests/test_acceptance.py` to see one PASS line per
criterion.  The final conditional test exercises real pretrained
weights and an on-disk benchmark sequence; it skips (never fails) when
those assets are not configured via CTXTRACK_WEIGHTS_CWB and
CTXTRACK_OTB_SEQUENCE.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from ctxtrack import adapt, synth
from ctxtrack.backbone import make_toy_backbone
from ctxtrack.eval import (
    auc,
    dp_at,
    precision_curve,
    success_curve,
)
from ctxtrack.gradcheck import run_checks
from ctxtrack.loss import CsLossParams, ce_loss, cs_loss, modulating_factor
from ctxtrack.sampling import BBox, iou
from ctxtrack.tracker import MemoryStore, TrackerConfig, track_sequence

from test_adapt import brute_importance
from test_tracker import simulate_memory


def _report(name):
    print(f"\nACCEPTANCE [{name}]: PASS")


def run_preset(preset_name, seed, loss_kind="cs"):
    frames, gts, _ = synth.generate(synth.preset(preset_name, seed=seed))
    cfg = TrackerConfig(seed=seed, loss_kind=loss_kind)
    weights = make_toy_backbone(seed=seed)
    start = time.monotonic()
    run = track_sequence(frames, gts[0], cfg, weights)
    elapsed = time.monotonic() - start
    ious = [iou(r.box, g) for r, g in zip(run, gts)]
    return run, ious, elapsed


class TestGradientCorrectness:
    def test_all_backwards_match_finite_differences(self):
        """Analytic gradients of every op (conv2d incl. dilation 3, lrn,
        maxpool, softmax2, the head composition, all three losses) match
        central differences, rel err < 1e-3, >= 100 instances, < 60 s."""
        results, elapsed = run_checks(seed=2024, instances=100)
        for r in results:
            assert r.instances >= 100
            assert r.passed, r.line()
        names = {r.name for r in results}
        assert {"conv2d", "lrn", "maxpool2d", "softmax2", "head_composition",
                "loss_ce", "loss_focal", "loss_cs"} <= names
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
        _report("gradient-correctness")


class TestLossLaw:
    def test_pinned_values_and_shape_properties(self):
        """Cost-sensitive loss law at the published best setting
        (alpha=10, beta=0.2, gamma=2).

        Reference values are frozen from direct evaluation of the loss
        formula (see tests/test_loss.py::eval_cs); the value at
        p_t = 0.5 is 0.4314559, at 0.9 it is 0.0137083."""
        params = CsLossParams(alpha=10.0, beta=0.2, gamma=2.0)
        assert float(cs_loss(0.5, 1, params)) == pytest.approx(
            0.4314559304357946, abs=1e-6)
        assert float(cs_loss(0.9, 1, params)) == pytest.approx(
            0.0137082959503385, abs=1e-6)

        grid = np.arange(0.001, 1.0, 0.001)
        cs = cs_loss(grid, 1, params)
        ce = ce_loss(grid, 1)
        ratio = cs / ce
        assert np.all(ratio > 0.0) and np.all(ratio < 1.0)

        m = modulating_factor(grid, params)
        assert np.all(np.diff(m) <= 1e-15)

        hard = grid[grid <= 0.1]
        hard_ratio = cs_loss(hard, 1, params) / ce_loss(hard, 1)
        assert np.all(hard_ratio >= 0.99)
        assert float(cs_loss(0.1, 1, params) / ce_loss(0.1, 1)) == \
            pytest.approx(0.99776, abs=1e-5)
        _report("loss-law")


class TestChannelImportanceOracle:
    def test_matches_perturbation_oracle(self):
        """Analytic channel importance equals the epsilon-perturbation
        oracle within rel err 1e-2 on 20 seeded toy instances."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            kernel = rng.normal(0, 0.2, size=(2, 6, 3, 3)).astype(np.float32)
            weights = adapt.ConvDaWeights(kernel=kernel,
                                          bias=np.zeros(2, np.float32))
            neg = [rng.normal(size=(6, 7, 7)).astype(np.float32)
                   for _ in range(3)]
            analytic = adapt.channel_importance(weights, neg)
            oracle = brute_importance(weights, neg)
            rel = np.abs(analytic - oracle) / np.maximum(np.abs(oracle), 1e-8)
            assert rel.max() < 1e-2, f"seed {seed}: rel err {rel.max():.2e}"
        _report("channel-importance-oracle")

    def test_selection_equals_sort_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            imp = rng.uniform(size=64)
            k = int(rng.integers(1, 65))
            got = adapt.select_channels(imp, k=k).indices.tolist()
            oracle = sorted(sorted(range(64), key=lambda i: (-imp[i], i))[:k])
            assert got == oracle
        _report("channel-selection-sort-oracle")

    def test_planted_channel_recovery(self):
        """Known discriminative channels recovered in >= 19/20 seeds."""
        channels, k = 24, 8
        planted = np.array([2, 5, 11, 17])
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(500 + seed)
            feats, labels = [], []
            for y in (1, 0):
                for _ in range(30):
                    f = rng.normal(0, 0.5, size=(channels, 7, 7))
                    f[planted] += (1.0 if y == 1 else -1.0) * 2.0
                    feats.append(f.astype(np.float32))
                    labels.append(y)
            result = adapt.train_conv_da(feats, np.array(labels), iters=60,
                                         seed=seed)
            neg = [f for f, y in zip(feats, labels) if y == 0]
            mask = adapt.select_channels(
                adapt.channel_importance(result.weights, neg), k=k)
            hits += set(planted).issubset(set(mask.indices.tolist()))
        assert hits >= 19, f"recovered in only {hits}/20 seeds"
        _report("planted-channel-recovery")


class TestStateMachine:
    def test_scripted_trace_matches_reference(self):
        """Update kinds, memory contents and eviction order over 30
        scripted frames match an independent simulation exactly at
        tau_short=3, tau_long=5, tau_interval=4."""
        tau_short, tau_long, tau_interval = 3, 5, 4
        rng = np.random.default_rng(42)
        scores = rng.uniform(0.1, 1.0, size=29)  # frames 2..30

        short, long_ = [1], [1]
        expected = []
        for t, score in zip(range(2, 31), scores):
            ok = score >= 0.5
            if ok:
                short = (short + [t])[-tau_short:]
                long_ = (long_ + [t])[-tau_long:]
            kind = "short" if not ok else (
                "long" if t % tau_interval == 0 else "none")
            expected.append((kind, short[:], long_[:]))

        trace = simulate_memory(scores, tau_short, tau_long, tau_interval)
        assert trace == expected

        # Invariants at every step: bounds, subset, success-only admission.
        store = MemoryStore(tau_short, tau_long)
        store.admit(1, [], [])
        admitted = {1}
        for t, score in zip(range(2, 31), scores):
            if score >= 0.5:
                store.admit(t, [], [])
                admitted.add(t)
            store.check_invariants()
            assert set(store.long) <= admitted
            if score < 0.5:
                assert t not in store.long
        _report("state-machine-trace")


class TestEndToEndSynthetic:
    def test_easy_translation(self):
        """Mean IoU >= 0.6 over 60 frames, each run < 5 min, 5 seeds."""
        means, times = [], []
        for seed in range(5):
            _, ious, elapsed = run_preset("easy_translation", seed)
            means.append(float(np.mean(ious)))
            times.append(elapsed)
            assert elapsed < 300.0, f"seed {seed} took {elapsed:.0f}s"
        assert float(np.mean(means)) >= 0.6, f"mean IoU {means}"
        _report(f"e2e-easy-translation (IoU {np.mean(means):.3f}, "
                f"{np.mean(times):.0f}s/run)")

    def test_occlusion_recovery(self):
        """IoU >= 0.4 on >= 70% of post-occlusion frames, 5 seeds."""
        fracs, times = [], []
        for seed in range(5):
            run, ious, elapsed = run_preset("occlusion", seed)
            post = ious[35:]  # the occluder leaves after frame 35
            fracs.append(float(np.mean([v >= 0.4 for v in post])))
            times.append(elapsed)
            assert elapsed < 300.0, f"seed {seed} took {elapsed:.0f}s"
        assert float(np.mean(fracs)) >= 0.7, f"recovery fractions {fracs}"
        _report(f"e2e-occlusion-recovery (frac {np.mean(fracs):.2f}, "
                f"{np.mean(times):.0f}s/run)")


class TestLossAblation:
    def test_cost_sensitive_beats_plain_ce_on_distractors(self):
        """On the twin-distractor scenes the cost-sensitive tracker's
        mean IoU is at least the plain-CE tracker's, paired over 10
        seeds.  Only the ordering is asserted; absolute magnitudes are
        not reproducible at desk scale."""
        cs_means, ce_means = [], []
        for seed in range(10):
            _, cs_ious, _ = run_preset("distractor", seed, loss_kind="cs")
            _, ce_ious, _ = run_preset("distractor", seed, loss_kind="ce")
            cs_means.append(float(np.mean(cs_ious)))
            ce_means.append(float(np.mean(ce_ious)))
        cs_mean = float(np.mean(cs_means))
        ce_mean = float(np.mean(ce_means))
        assert cs_mean >= ce_mean, (
            f"cs {cs_mean:.4f} < ce {ce_mean:.4f}; per-seed cs {cs_means}, "
            f"ce {ce_means}")
        _report(f"loss-ablation (cs {cs_mean:.3f} >= ce {ce_mean:.3f})")


class TestMetricConventions:
    def test_oracle_and_constant_iou_runs(self):
        """Oracle run: DP@20 = 1 and AUC = 20/21 exactly; constant IoU
        0.5 run: AUC = 10/21 exactly; both curves monotone."""
        rng = np.random.default_rng(3)
        # Integer coordinates keep the half-width overlap exactly 0.5.
        gt = [BBox(10 + i, 20 + int(rng.integers(-3, 4)), 40, 30)
              for i in range(25)]
        prec = precision_curve(gt, gt)
        succ = success_curve(gt, gt)
        assert dp_at(prec, 20.0) == 1.0
        assert auc(succ) == 20.0 / 21.0

        half = [BBox(b.x, b.y, b.w / 2.0, b.h) for b in gt]
        assert all(iou(a, b) == 0.5 for a, b in zip(half, gt))
        assert auc(success_curve(half, gt)) == 10.0 / 21.0

        noisy = [BBox(b.x + float(rng.uniform(-25, 25)),
                      b.y + float(rng.uniform(-25, 25)), b.w, b.h)
                 for b in gt]
        assert np.all(np.diff(precision_curve(noisy, gt).values) >= 0)
        assert np.all(np.diff(success_curve(noisy, gt).values) <= 0)
        _report("metric-conventions")


class TestPretrainedSmoke:
    def test_real_weights_and_sequence_if_available(self, tmp_path):
        """Full-scale benchmark numbers are out of scope at desk scale;
        this smoke path only checks the pipeline runs end to end on real
        assets when they are provided."""
        weights_path = os.environ.get("CTXTRACK_WEIGHTS_CWB")
        seq_dir = os.environ.get("CTXTRACK_OTB_SEQUENCE")
        if not weights_path or not os.path.isfile(weights_path):
            pytest.skip("CTXTRACK_WEIGHTS_CWB not set; smoke path skipped")
        if not seq_dir or not os.path.isdir(seq_dir):
            pytest.skip("CTXTRACK_OTB_SEQUENCE not set; smoke path skipped")

        from ctxtrack.cli import main

        out = tmp_path / "run"
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"weights": weights_path}))
        assert main(["track", str(seq_dir), "--config", str(cfg_path),
                     "--seed", "0", "--out", str(out)]) == 0
        lines = (out / "results.jsonl").read_text().splitlines()
        from ctxtrack.eval import load_otb_sequence
        record = load_otb_sequence(seq_dir)
        assert len(lines) == len(record.frame_paths)
        for line in lines:
            rec = json.loads(line)
            assert 0.0 < rec["score"] < 1.0
        scores = json.loads((out / "scores.json").read_text())
        assert math.isfinite(scores["dp20"]) and math.isfinite(scores["auc"])
        _report("pretrained-smoke")
