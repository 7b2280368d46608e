"""Standard vs privacy-aware architecture search on the synthetic task.

Both workflows search the FCN space with PAAS and finish with the same DP-SGD
training; only the privacy-aware one uses DP fitness during the search.

    python scripts/run_search_comparison.py --gens 4 --pop 6
"""

import argparse

from privaware.arch_search import fcn_space
from privaware.data import split, synthetic_sum_dataset
from privaware.numerics import RngStream
from privaware.workflows import TrainSpec, compare_workflows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--expansion", type=int, default=10)
    ap.add_argument("--gens", type=int, default=4)
    ap.add_argument("--pop", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--eps-prime", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    rng = RngStream(args.seed)
    ds = split(synthetic_sum_dataset(args.n, 10, args.expansion, rng.child("data")), (0.7, 0.15, 0.15),
               rng.child("split"))
    space = fcn_space(ds.m, 2, dropout=0.0)
    spec = TrainSpec(batch=100, epochs=args.epochs)
    res = compare_workflows(ds, space, spec, args.gens, args.pop, args.eps_prime, args.seed, args.workers)
    for name, r in res.items():
        search = "n/a" if r.search_epsilon is None else f"{r.search_epsilon:.3f}"
        print(f"{name}: test acc {r.test_accuracy:.4f}  final eps {r.final_epsilon:.3f}  search eps {search}  "
              f"trainings {r.unique_trainings}  arch {r.genes}")


if __name__ == "__main__":
    main()
