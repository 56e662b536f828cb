"""Command line entry point.  Every subcommand shares --config, --seed,
--threads, --out and --record-timings; failures print one JSON object on
stderr and exit nonzero."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4

COMMANDS = pipeline.STAGES + ("report", "pipeline")


def default_config_path():
    return str(resources.files("splattrace") / "configs" / "golden.json")


def build_parser():
    p = argparse.ArgumentParser(prog="splattrace", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run config JSON (default: packaged golden config)")
    common.add_argument("--seed", type=int, default=None, help="global seed; re-derives module seeds")
    common.add_argument("--threads", type=int, default=1, help="raster worker threads")
    common.add_argument("--out", default=None, help="run directory (overrides config and env)")
    common.add_argument("--record-timings", action="store_true",
                        help="store wall-clock seconds in reports (breaks byte identity)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "eval":
            sp.add_argument("--pred-dir", default=None, help="directory of predicted P5 maps")
            sp.add_argument("--gt-dir", default=None, help="directory of ground-truth P5 maps")
    return p


def _fail(kind, message, code):
    json.dump({"error": kind, "message": str(message)}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config or default_config_path(), args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, OSError) as e:
        return _fail("config", e, EXIT_CONFIG)
    out = Path(args.out or cfg.resolved_output())
    ctx = pipeline.Context(cfg, out, args.threads, args.record_timings)
    try:
        if args.command == "pipeline":
            rep = pipeline.run_pipeline(ctx)
        elif args.command == "report":
            rep = pipeline.collect_report(ctx)
        elif args.command == "eval" and (args.pred_dir or args.gt_dir):
            if not (args.pred_dir and args.gt_dir):
                return _fail("usage", "--pred-dir and --gt-dir go together", EXIT_CONFIG)
            rep = pipeline.make_report("eval", pipeline.eval_dirs(args.pred_dir, args.gt_dir))
            out.mkdir(parents=True, exist_ok=True)
            pipeline.write_json(out / "eval_dirs.json", rep)
        else:
            rep = pipeline.run_stage(ctx, args.command)
    except pipeline.PipelineError as e:
        return _fail("input", e, EXIT_INPUT)
    except ValueError as e:
        # module errors (scene, trace, merge, ...) all derive from ValueError
        return _fail(type(e).__name__, e, EXIT_INPUT)
    except Exception as e:  # noqa: BLE001 - reported, not swallowed
        return _fail("internal", f"{type(e).__name__}: {e}", EXIT_INTERNAL)
    print(json.dumps(pipeline._clean(rep["metrics"]), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
