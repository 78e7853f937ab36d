"""cwb-export command line: `export` a MAT archive, `verify` a CWB file."""

from __future__ import annotations

import argparse
import json
import sys

from .convert import ExportError, ExportManifest, export, verify
from .cwb import CwbFormatError


def cmd_export(args) -> int:
    manifest = ExportManifest.from_json(args.manifest)
    summary = export(args.src, manifest, args.out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_verify(args) -> int:
    manifest = ExportManifest.from_json(args.manifest)
    checks = verify(args.cwb, manifest, expected_sha256=args.sha256)
    failed = 0
    for name, ok, detail in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwb-export",
        description="Convert pretrained conv layers from a MAT archive into "
                    "the CWB weight container.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert an archive to CWB")
    p.add_argument("--src", required=True, help="MAT archive path")
    p.add_argument("--manifest", required=True, help="layer-mapping JSON")
    p.add_argument("--out", required=True, help="output CWB path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="check an exported CWB file")
    p.add_argument("--cwb", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sha256", default=None,
                   help="expected content hash, if pinned")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExportError, CwbFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
