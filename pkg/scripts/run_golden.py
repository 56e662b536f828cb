"""Run the full pipeline on the golden config with stage timings and print
the summary block of report.json."""

import argparse
import json
import sys
from pathlib import Path

from splattrace import cli


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/golden")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    code = cli.main(["pipeline", "--seed", str(args.seed), "--threads", str(args.threads),
                     "--out", args.out, "--record-timings"])
    if code:
        return code
    rep = json.loads((Path(args.out) / "report.json").read_text())
    print(json.dumps({"summary": rep["metrics"]["summary"], "seconds": rep["timings"]}, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
