"""Space-time speedup over the best competitor for the three microbenchmarks."""

import argparse

from gpushare.cli import render_table
from gpushare.cost_model import load_profile
from gpushare.experiments import MICROBENCH, table1, time_only_speedup


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="v100")
    ap.add_argument("--r-max", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    device = load_profile(args.profile)
    rs = range(2, args.r_max + 1)
    body = {"R = 10": [], "R = 20": [], "geomean": [], "next best": [], "vs time-only": []}
    for w in MICROBENCH:
        t, runs = table1(device, w, rs, args.seed)
        body["R = 10"].append(f"{t.ratio_at(10):.2f}" if 10 in rs else "-")
        body["R = 20"].append(f"{t.ratio_at(20):.2f}" if 20 in rs else "-")
        body["geomean"].append(f"{t.geomean:.2f}")
        body["next best"].append(t.next_best)
        body["vs time-only"].append(f"{time_only_speedup(runs, w, rs):.2f}")
    print(render_table(["row", *MICROBENCH], [[k, *v] for k, v in body.items()]), end="")


if __name__ == "__main__":
    main()
