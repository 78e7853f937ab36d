import json
import math

import pytest

from ctxtrack import synth
from ctxtrack.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    load_run_config,
    main,
)

FAST_CONFIG = {
    "tau_short": 3, "tau_long": 5, "tau_interval": 4,
    "first_frame_iters": 15, "online_iters": 4,
    "candidates_per_frame": 48, "regressor_candidates": 128,
    "da_iters": 15, "toy_backbone": True,
}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq") / "easy"
    frames, gts, tags = synth.generate(synth.preset("easy_translation", seed=3))
    synth.save_sequence(out, frames[:10], gts[:10], tags)
    return out


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return path


class TestRunConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"tau_shrot": 3}))
        with pytest.raises(Exception, match="tau_shrot"):
            load_run_config(path)

    def test_nested_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"loss_params": {"alpha": 5, "omega": 1}}))
        with pytest.raises(Exception, match="omega"):
            load_run_config(path)

    def test_defaults_match_published_settings(self):
        cfg, _ = load_run_config(None)
        assert cfg.first_frame_iters == 50
        assert cfg.first_frame_lr == pytest.approx(0.0015)
        assert cfg.online_iters == 10
        assert cfg.online_lr == pytest.approx(0.0025)
        assert cfg.loss_params.alpha == 10.0
        assert cfg.loss_params.beta == 0.2
        assert cfg.loss_params.gamma == 2.0
        assert cfg.da_lr == pytest.approx(0.003)
        assert cfg.da_iters == 100
        assert cfg.score_threshold == 0.5

    def test_seed_override(self, fast_config):
        cfg, _ = load_run_config(fast_config, seed=77)
        assert cfg.seed == 77


class TestTrackCommand:
    def test_runs_and_writes_outputs(self, synth_dir, fast_config, tmp_path):
        out = tmp_path / "run"
        code = main(["track", str(synth_dir), "--config", str(fast_config),
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        lines = (out / "results.jsonl").read_text().splitlines()
        assert len(lines) == 10
        rec = json.loads(lines[0])
        assert set(rec) == {"frame", "x", "y", "w", "h", "score", "update"}
        scores = json.loads((out / "scores.json").read_text())
        assert 0.0 <= scores["auc"] <= 1.0
        assert (out / "precision.csv").exists()
        assert len((out / "success.csv").read_text().splitlines()) == 21

    def test_byte_identical_reruns(self, synth_dir, fast_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["track", str(synth_dir), "--config",
                         str(fast_config), "--seed", "2",
                         "--out", str(out)]) == 0
        assert (a / "results.jsonl").read_bytes() == \
            (b / "results.jsonl").read_bytes()

    def test_malformed_config_exit_code(self, synth_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"tau_shrot": 1}))
        code = main(["track", str(synth_dir), "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "tau_shrot" in capsys.readouterr().err

    def test_missing_weights_without_toy_flag(self, synth_dir, tmp_path):
        code = main(["track", str(synth_dir), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_missing_sequence_is_data_error(self, fast_config, tmp_path):
        code = main(["track", str(tmp_path / "nope"), "--config",
                     str(fast_config), "--out", str(tmp_path / "o")])
        assert code == EXIT_DATA


class TestEvalCommand:
    def test_oracle_run_scores_perfectly(self, synth_dir, tmp_path):
        record_lines = []
        from ctxtrack.eval import load_otb_sequence
        record = load_otb_sequence(synth_dir)
        for i, b in enumerate(record.gt_boxes):
            record_lines.append(json.dumps(
                {"frame": i + 1, "x": b.x, "y": b.y, "w": b.w, "h": b.h,
                 "score": 0.9, "update": "none"}))
        run_path = tmp_path / "oracle.jsonl"
        run_path.write_text("\n".join(record_lines) + "\n")
        out = tmp_path / "report"
        code = main(["eval", "--run", str(run_path), "--sequence",
                     str(synth_dir), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["overall"][0]["dp20"] == 1.0
        assert report["overall"][0]["auc"] == pytest.approx(20 / 21)

    def test_mismatched_lengths_exit_data(self, synth_dir, tmp_path):
        run_path = tmp_path / "short.jsonl"
        run_path.write_text(json.dumps(
            {"frame": 1, "x": 0, "y": 0, "w": 5, "h": 5, "score": 1,
             "update": "none"}) + "\n")
        code = main(["eval", "--run", str(run_path), "--sequence",
                     str(synth_dir), "--out", str(tmp_path / "r")])
        assert code == EXIT_DATA


class TestSynthCommand:
    def test_writes_frames_and_gt(self, tmp_path):
        out = tmp_path / "seq"
        code = main(["synth", "easy_translation", "--seed", "4",
                     "--out", str(out)])
        assert code == 0
        assert len(list((out / "img").iterdir())) == 60
        assert (out / "groundtruth_rect.txt").exists()


class TestLossTableCommand:
    def test_includes_reference_row(self, capsys):
        assert main(["loss-table"]) == 0
        out = capsys.readouterr().out
        rows = {line.split(",")[0]: line for line in out.splitlines()[1:]}
        cs_at_half = float(rows["0.5"].split(",")[3])
        # Frozen from direct evaluation of the loss formula.
        assert cs_at_half == pytest.approx(0.431456, abs=1e-6)
        ratio = float(rows["0.1"].split(",")[4])
        assert ratio == pytest.approx(0.997762, abs=1e-6)

    def test_write_to_file(self, tmp_path):
        assert main(["loss-table", "--out", str(tmp_path)]) == 0
        text = (tmp_path / "loss_table.csv").read_text()
        assert text.startswith("p_t,ce,focal,cs")
        assert len(text.splitlines()) == 100  # header + 99 grid rows


class TestGradCheckCommand:
    def test_exit_zero_on_clean_build(self, capsys):
        assert main(["grad-check", "--instances", "3"]) == 0
        out = capsys.readouterr().out
        assert "[PASS] conv2d" in out
        assert "[FAIL]" not in out


class TestDaReportCommand:
    def test_emits_importance_and_mask(self, synth_dir, fast_config, tmp_path):
        out = tmp_path / "da"
        code = main(["da-report", str(synth_dir), "--config",
                     str(fast_config), "--seed", "1", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "da_report.json").read_text())
        assert len(report["channel_importance"]) == 128
        assert len(report["mask"]) == round(128 * 420 / 512)
        assert all(math.isfinite(v) for v in report["channel_importance"])
        assert len(report["training_loss_curve"]) == 15
        assert report["mask"] == sorted(report["mask"])
