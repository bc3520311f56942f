"""Train benchmark arms over several seeds and tabulate greedy SR/SPL on the test worlds.

    python3 scripts/run_benchmark.py --arms ssnet zs_baseline --seeds 0 1 2
    python3 scripts/run_benchmark.py --arms ssnet no_sa no_pr --episodes 5000 --out ablation.csv
"""

import argparse
import csv
import sys
import time

import numpy as np

from ssnav.experiment import ARMS, BENCHMARK_TRAIN, run_arm, run_random, zero_shot_benchmark


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arms", nargs="+", default=["ssnet", "zs_baseline"], choices=sorted(ARMS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=BENCHMARK_TRAIN["episodes_total"])
    ap.add_argument("--n-eval", type=int, default=250, help="episodes per target group")
    ap.add_argument("--out", help="optional CSV of per-run numbers")
    args = ap.parse_args(argv)

    bench = zero_shot_benchmark()
    rows = []
    rand = run_random(bench, args.n_eval)
    rows.append(("random", "-", rand, 0.0))
    print(f"random (sampled): seen {rand.sr('seen'):.1f} unseen {rand.sr('unseen'):.1f}", flush=True)
    for arm in args.arms:
        for seed in args.seeds:
            t0 = time.perf_counter()
            run = run_arm(bench, arm, seed, args.n_eval, episodes_total=args.episodes)
            dt = time.perf_counter() - t0
            rows.append((arm, seed, run, dt))
            print(f"{arm} seed {seed}: seen {run.sr('seen'):.1f} unseen {run.sr('unseen'):.1f} ({dt:.0f}s)", flush=True)

    print("\narm          seen SR  unseen SR  seen SR(L>=5)  unseen SR(L>=5)")
    for arm in ["random"] + args.arms:
        runs = [r for a, _, r, _ in rows if a == arm]
        cols = [np.mean([r.sr(g, t) for r in runs]) for t, g in ((1, "seen"), (1, "unseen"), (5, "seen"), (5, "unseen"))]
        print(f"{arm:<12} " + "  ".join(f"{c:8.1f}" for c in cols))

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "seed", "group", "bucket", "SR", "SPL", "N", "train_seconds"])
            for arm, seed, run, dt in rows:
                for group in ("seen", "unseen"):
                    for t in (1, 5):
                        cell = run.report[group, t]
                        if cell is not None:
                            w.writerow([arm, seed, group, f"L>={t}", f"{cell.sr:.2f}", f"{cell.spl:.2f}", cell.n, f"{dt:.0f}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
