"""Command-line surface: track, eval, synth, loss-table, grad-check,
da-report.

Configs are JSON documents mirroring the tracker settings; unknown keys
are rejected so typos cannot silently fall back to defaults.  Exit
codes: 1 config error, 2 data error, 3 runtime tracking error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import backbone, eval as eval_mod, synth
from .gradcheck import run_checks
from .loss import CsLossParams, ce_loss, cs_loss, focal_loss
from .sampling import SamplerCfg, SamplingExhaustedError
from .tracker import TrackerConfig, TrackingError, init, track_sequence

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

THREADS_ENV = "CONTEXT_TRACKER_THREADS"

TOY_CHANNELS = (32, 64, 128)


class ConfigError(ValueError):
    pass


_TRACKER_KEYS = {f.name for f in dataclasses.fields(TrackerConfig)}
_EXTRA_KEYS = {"weights", "toy_backbone"}


def load_run_config(path, seed=None, toy_backbone=False) -> tuple[TrackerConfig, dict]:
    """Parse and validate a run-config JSON; CLI flags override it."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")

    unknown = set(raw) - _TRACKER_KEYS - _EXTRA_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")

    kwargs = {k: v for k, v in raw.items() if k in _TRACKER_KEYS}
    if "loss_params" in kwargs:
        lp = kwargs["loss_params"]
        bad = set(lp) - {f.name for f in dataclasses.fields(CsLossParams)}
        if bad:
            raise ConfigError(f"unknown loss_params key(s): {sorted(bad)}")
        kwargs["loss_params"] = CsLossParams(**lp)
    if "sampler" in kwargs:
        sc = kwargs["sampler"]
        bad = set(sc) - {f.name for f in dataclasses.fields(SamplerCfg)}
        if bad:
            raise ConfigError(f"unknown sampler key(s): {sorted(bad)}")
        kwargs["sampler"] = SamplerCfg(**sc)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        cfg = TrackerConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid tracker config: {exc}") from exc

    extras = {"weights": raw.get("weights"),
              "toy_backbone": bool(raw.get("toy_backbone", False)) or toy_backbone}
    return cfg, extras


def _load_backbone(extras, seed) -> backbone.BackboneWeights:
    if extras["weights"]:
        return backbone.load_cwb(extras["weights"])
    if extras["toy_backbone"]:
        return backbone.make_toy_backbone(seed=seed, channels=TOY_CHANNELS)
    raise ConfigError("no weights file configured; pass --toy-backbone to "
                      "run with a seeded random backbone")


def _thread_count() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        return max(1, int(value))
    return min(4, os.cpu_count() or 1)


def _write_curves(out_dir, name, curve) -> None:
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        for t, v in zip(curve.thresholds, curve.values):
            fh.write(f"{t:g},{v:.6f}\n")


def _write_run(out_dir, results, scores) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.jsonl"), "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record()) + "\n")
    with open(os.path.join(out_dir, "scores.json"), "w") as fh:
        json.dump({"dp20": scores["dp20"], "auc": scores["auc"]}, fh, indent=2)
        fh.write("\n")
    _write_curves(out_dir, "precision.csv", scores["precision_curve"])
    _write_curves(out_dir, "success.csv", scores["success_curve"])


def cmd_track(args) -> int:
    cfg, extras = load_run_config(args.config, args.seed, args.toy_backbone)
    weights = _load_backbone(extras, cfg.seed)
    record = eval_mod.load_otb_sequence(args.sequence)
    frames = (eval_mod.load_frame(p) for p in record.frame_paths)
    results = track_sequence(frames, record.gt_boxes[0], cfg, weights)
    scores = eval_mod.score_run([r.box for r in results], record.gt_boxes)
    _write_run(args.out, results, scores)
    print(f"{record.name}: dp20={scores['dp20']:.4f} auc={scores['auc']:.4f}")
    return 0


def _read_run_boxes(path):
    from .sampling import BBox
    boxes = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            boxes.append(BBox(rec["x"], rec["y"], rec["w"], rec["h"]))
    return boxes


def cmd_eval(args) -> int:
    if len(args.run) != len(args.sequence):
        print("error: need one --sequence per --run", file=sys.stderr)
        return EXIT_DATA
    records = {}
    runs = {}
    for run_path, seq_dir in zip(args.run, args.sequence):
        record = eval_mod.load_otb_sequence(seq_dir)
        boxes = _read_run_boxes(run_path)
        if len(boxes) != len(record.gt_boxes):
            print(f"error: {run_path} has {len(boxes)} boxes for "
                  f"{len(record.gt_boxes)} frames", file=sys.stderr)
            return EXIT_DATA
        records[record.name] = record
        runs[record.name] = boxes

    def score(name):
        return name, eval_mod.score_run(runs[name], records[name].gt_boxes)

    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        scored = dict(pool.map(score, sorted(runs)))

    os.makedirs(args.out, exist_ok=True)
    ranked = sorted(scored, key=lambda n: scored[n]["auc"], reverse=True)
    report = {
        "overall": [{"sequence": n, "dp20": scored[n]["dp20"],
                     "auc": scored[n]["auc"]} for n in ranked],
        "attributes": eval_mod.attribute_report(runs, records),
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for name in ranked:
        _write_curves(args.out, f"{name}.precision.csv",
                      scored[name]["precision_curve"])
        _write_curves(args.out, f"{name}.success.csv",
                      scored[name]["success_curve"])
        print(f"{name}: dp20={scored[name]['dp20']:.4f} "
              f"auc={scored[name]['auc']:.4f}")
    return 0


def cmd_synth(args) -> int:
    spec = synth.preset(args.preset, seed=args.seed or 0)
    frames, gts, tags = synth.generate(spec)
    synth.save_sequence(args.out, frames, gts, tags)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_loss_table(args) -> int:
    params = CsLossParams(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                          nu=args.nu)
    lines = ["p_t,ce,focal,cs,cs_over_ce"]
    for i in range(1, args.grid):
        pt = i / args.grid
        ce = float(ce_loss(pt, 1))
        fl = float(focal_loss(pt, 1, params.nu))
        cs = float(cs_loss(pt, 1, params))
        lines.append(f"{pt:g},{ce:.6f},{fl:.6f},{cs:.6f},{cs / ce:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "loss_table.csv"), "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    results, elapsed = run_checks(seed=args.seed or 0,
                                  instances=args.instances)
    for r in results:
        print(r.line())
    print(f"total: {elapsed:.1f}s")
    return 0 if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_da_report(args) -> int:
    cfg, extras = load_run_config(args.config, args.seed, args.toy_backbone)
    weights = _load_backbone(extras, cfg.seed)
    record = eval_mod.load_otb_sequence(args.sequence)
    frame = eval_mod.load_frame(record.frame_paths[0])
    state, _ = init(frame, record.gt_boxes[0], cfg, weights)
    report = {
        "channel_importance": [float(v) for v in state.importance],
        "mask": [int(i) for i in state.mask.indices],
        "training_loss_curve": [float(v) for v in state.da_loss_curve],
    }
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "da_report.json")
    with open(path, "w") as fh:
        json.dump(report, fh)
        fh.write("\n")
    print(f"wrote {path} ({len(state.mask)} of "
          f"{len(state.importance)} channels selected)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxtrack",
        description="Online visual tracker with one-shot channel selection "
                    "and a cost-sensitive online loss.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="run-config JSON")
            p.add_argument("--toy-backbone", action="store_true",
                           help="use a seeded random reduced-width backbone")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("track", help="track one sequence directory")
    p.add_argument("sequence", help="sequence directory (img/ + gt file)")
    common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score stored runs against sequences")
    p.add_argument("--run", action="append", required=True,
                   help="results.jsonl path (repeatable)")
    p.add_argument("--sequence", action="append", required=True,
                   help="matching sequence directory (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic preset sequence")
    p.add_argument("preset", choices=synth.PRESET_NAMES)
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("loss-table", help="emit the loss-family table as CSV")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=100,
                   help="evaluate at i/grid for i in 1..grid-1")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loss_table)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("da-report", help="first-frame channel-selection report")
    p.add_argument("sequence")
    common(p)
    p.set_defaults(func=cmd_da_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (eval_mod.SequenceFormatError, backbone.CwbError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrackingError, SamplingExhaustedError) as exc:
        print(f"tracking error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
