"""sliceview CLI: analyze, pipeline-compare."""
from __future__ import annotations

import argparse
import json
import sys

from .analyze import analyze
from .formats import FormatError
from .pipeline import pipeline_compare
from .wire import ProtocolError, Timeout


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sliceview",
        description="Stepping-mode slice analysis for containers, flat files, "
                    "and live staging endpoints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="one heatmap + stats row per step")
    p.add_argument("--source", required=True,
                   help="container dir, flat file, or host:port endpoint")
    p.add_argument("--var", default="T")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--analysis-ms", type=float, default=0.0,
                   help="extra per-step analysis sleep (controlled experiments)")
    p.add_argument("--timeout-s", type=float, default=30.0)
    p.add_argument("--no-render", action="store_true")

    p = sub.add_parser("pipeline-compare",
                       help="in-situ streaming vs process-after-run timing")
    p.add_argument("--config", required=True, help="JSON config")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            timing = analyze(args.source, args.var, args.level, args.out,
                             analysis_ms=args.analysis_ms,
                             timeout_s=args.timeout_s,
                             render=not args.no_render)
            print(f"analyzed {timing['steps']} steps "
                  f"({timing['totals']['consumer_wall_s']:.2f}s); "
                  f"outputs in {args.out}")
        else:
            with open(args.config) as f:
                config = json.load(f)
            result = pipeline_compare(config, args.out)
            a = result["in_situ"]["totals"]["end_to_end_s"]
            b = result["after_run"]["totals"]["end_to_end_s"]
            print(f"in-situ {a:.2f}s vs after-run {b:.2f}s "
                  f"(ratio {result['end_to_end_ratio']:.2f})")
        return 0
    except KeyError as exc:
        print(f"unknown variable: {exc}", file=sys.stderr)
        return 3
    except (Timeout, TimeoutError) as exc:
        print(f"source timeout: {exc}", file=sys.stderr)
        return 4
    except (ProtocolError, FormatError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
