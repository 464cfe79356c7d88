"""Forward-pass latency under each sharing policy relative to exclusive access."""

import argparse

from gpushare.cli import render_table
from gpushare.cost_model import load_profile
from gpushare.experiments import SLOWDOWN_COUNTS, SLOWDOWN_MODELS, make_config, run_cell
from gpushare.metrics import geomean
from gpushare.policies import PolicyKind

POLICIES = (PolicyKind.TIME_MUX, PolicyKind.SPACE_IMPLICIT, PolicyKind.SPACE_EXPLICIT)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="v100")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    device = load_profile(args.profile)
    rows, ratios = [], {p: [] for p in POLICIES}
    for model in SLOWDOWN_MODELS:
        for n in SLOWDOWN_COUNTS:
            base = run_cell(make_config(model, "exclusive", 1, device, args.seed, 10, batch_size=n))
            row = [model, n, f"{base.metrics.mean_latency * 1e3:.3f}"]
            for p in POLICIES:
                m = run_cell(make_config(model, p, n, device, args.seed, 10)).metrics
                ratios[p].append(m.mean_latency / base.metrics.mean_latency)
                row.append(f"{m.mean_latency * 1e3:.3f} ({ratios[p][-1]:.2f}x)")
            rows.append(row)
    rows.append(["geomean", "", ""] + [f"{geomean(ratios[p]):.2f}x" for p in POLICIES])
    header = ["model", "n", "exclusive_ms"] + [f"{p.value}_ms" for p in POLICIES]
    print(render_table(header, rows), end="")


if __name__ == "__main__":
    main()
