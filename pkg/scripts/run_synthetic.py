"""Paired occluded/visible closed-loop episodes with the reactive braking policy.

    python3 scripts/run_synthetic.py --n 20
"""
import argparse

from riskfield.ablation import (
    ReactivePolicyParams, merge_corpus, paired_delta_coll, run_paired_episode, stopped_car_scenario,
)
from riskfield.pde import FULL, STATIC


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20, help="number of merge scenarios")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k-b", type=float, default=ReactivePolicyParams().k_b, help="braking gain")
    args = ap.parse_args(argv)

    policy = ReactivePolicyParams(k_b=args.k_b)
    corpus = merge_corpus(args.n, args.seed)
    print("mode,delta_coll,occluded_hits,visible_hits")
    for mode in (FULL, STATIC):
        d, pairs = paired_delta_coll(corpus, mode, policy)
        print(f"{mode.name},{d:.4f},{sum(a for a, _ in pairs)},{sum(b for _, b in pairs)}")

    sc = stopped_car_scenario()
    for mode in (FULL, STATIC):
        log = run_paired_episode(sc, mode, policy)
        brake = "none" if log.first_brake is None else f"{log.first_brake:.2f} s"
        print(f"stopped car [{mode.name}]: first brake {brake}, near collision {log.hit}")


if __name__ == "__main__":
    main()
