"""Per-tenant latency spread under implicit spatial sharing, by tenant count."""

import argparse
import statistics

from gpushare.cli import render_table
from gpushare.cost_model import load_profile
from gpushare.engine import run
from gpushare.experiments import make_config
from gpushare.metrics import aggregate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="v100")
    ap.add_argument("--model", default="resnet50")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--max-tenants", type=int, default=12)
    args = ap.parse_args()

    device = load_profile(args.profile)
    rows = []
    for n in range(2, args.max_tenants + 1):
        gaps = []
        for seed in range(args.seeds):
            c = make_config(args.model, "space-implicit", n, device, seed, rounds=10)
            gaps.append(aggregate(run(c), c).fairness_gap)
        rows.append([n, f"{statistics.mean(gaps):.4f}", f"{max(gaps):.4f}"])
    print(render_table(["tenants", "mean_gap", "max_gap"], rows), end="")


if __name__ == "__main__":
    main()
