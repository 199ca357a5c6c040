"""Operator ablation over the synthetic merge corpus.

    python3 scripts/run_ablation.py --n 20 --out results/ablation.csv
"""
import argparse
import time
from pathlib import Path

from riskfield.ablation import merge_corpus, merge_grid, run_ablation, scenario_episode
from riskfield.pde import TABLE_ARMS


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20, help="number of merge scenarios")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="write the ablation table as CSV")
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    episodes = [scenario_episode(sc) for sc in merge_corpus(args.n, args.seed)]
    table = run_ablation(episodes, TABLE_ARMS, merge_grid())
    text = table.to_csv()
    print(text, end="")
    for name, ok in sorted(table.ordering_checks().items()):
        print(f"{name}: {'ok' if ok else 'violated'}")
    print(f"elapsed {time.perf_counter() - t0:.1f} s")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


if __name__ == "__main__":
    main()
