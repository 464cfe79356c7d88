"""Refit the v100 profile knobs against the shipped targets file."""

import argparse
import json
import sys

from gpushare.calibrate import calibrate, load_targets


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--targets", default="builtin:v100_targets")
    ap.add_argument("--budget", type=int, default=60)
    ap.add_argument("--out", help="write the fitted profile here")
    args = ap.parse_args()

    result = calibrate(load_targets(args.targets), budget=args.budget, log=sys.stderr)
    for name, err in sorted(result.errors.items()):
        print(f"{'ok  ' if err <= 1 else 'MISS'} {name:40s} {result.values[name]!s:>20.20s}  err={err:.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result.device.to_dict(), fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
