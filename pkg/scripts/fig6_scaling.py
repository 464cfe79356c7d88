"""Throughput of concurrent conv2_2 SGEMMs versus replica count, per policy."""

import argparse

from gpushare.cli import render_table
from gpushare.cost_model import load_profile
from gpushare.experiments import SWEEP_POLICIES, microbench_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="v100")
    ap.add_argument("--workload", default="resnet18-conv2_2")
    ap.add_argument("--r-max", type=int, default=60)
    args = ap.parse_args()

    device = load_profile(args.profile)
    rs = range(1, args.r_max + 1)
    runs = microbench_sweep(device, args.workload, rs)
    rows = [[r] + [f"{runs[(args.workload, r, p)].throughput_gflops:.1f}" for p in SWEEP_POLICIES]
            for r in rs]
    print(render_table(["R"] + [f"{p.value}_gflops" for p in SWEEP_POLICIES], rows), end="")


if __name__ == "__main__":
    main()
