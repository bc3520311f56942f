"""Compare greedy and sampled decoding of one trained SSNet on the test worlds.

Sampled decoding escapes the loops (spinning in place, pushing into a wall)
that a deterministic argmax policy falls into, so the gap between the two
columns shows how much of the greedy failure rate is decoding, not search.

    python3 scripts/greedy_vs_sample.py --episodes 10000
"""

import argparse
import sys
from collections import Counter

from ssnav.evaluation import report, run_eval
from ssnav.experiment import EVAL_SEED, run_arm, zero_shot_benchmark
from ssnav.world import Action


def loop_kind(actions):
    """Classify a failed episode by its last 8 actions."""
    if actions[-1] == Action.DONE:
        return "early Done"
    tail = actions[-8:]
    if len(set(tail)) == 1:
        return Action(tail[0]).name.lower() + " only"
    if set(tail) <= {Action.ROTATE_LEFT, Action.ROTATE_RIGHT}:
        return "rotations only"
    return "mixed"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-eval", type=int, default=250)
    args = ap.parse_args(argv)

    bench = zero_shot_benchmark()
    run = run_arm(bench, "ssnet", args.seed, args.n_eval, episodes_total=args.episodes)
    sampled = report(run_eval(run.training.policy, bench.split, bench.test_worlds, args.n_eval, EVAL_SEED, mode="sample"))
    print("group    greedy SR  sampled SR")
    for group in ("seen", "unseen"):
        print(f"{group:<8} {run.sr(group):9.1f}  {sampled[group, 1].sr:10.1f}")
    kinds = Counter(loop_kind(r.actions) for r in run.results if not r.success and r.actions)
    print("\ngreedy failures by final behaviour:")
    for kind, n in kinds.most_common():
        print(f"  {kind:<16} {n}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
