"""Accuracy of a simple and a complex FCN over a grid of epsilons, plus their crossover.

Learning rate and clip norm are tuned per architecture and epsilon on a
validation split.

    python scripts/run_curve_sweep.py --eps 0.5,1,5,inf --out curves/
"""

import argparse

import numpy as np

from privaware.cli import emit_curve
from privaware.data import split, synthetic_sum_dataset
from privaware.numerics import RngStream
from privaware.theory import AccuracyCurve, crossover_epsilon
from privaware.workflows import TrainSpec, simple_and_complex, tuned_accuracy_at_epsilon


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--expansion", type=int, default=10)
    ap.add_argument("--eps", default="0.5,1,5,inf")
    ap.add_argument("--hidden", default="256,128")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="directory for the curve CSVs")
    args = ap.parse_args()

    rng = RngStream(args.seed)
    ds = split(synthetic_sum_dataset(args.n, 10, args.expansion, rng.child("data")), (0.64, 0.16, 0.2),
               rng.child("split"))
    train, val, test = ds.part("train"), ds.part("val"), ds.part("test")
    eps_grid = [float(t) for t in args.eps.split(",")]
    archs = simple_and_complex(ds.m, [int(t) for t in args.hidden.split(",")])
    spec = TrainSpec(batch=100, epochs=args.epochs)

    curves = {}
    for name, arch in archs.items():
        accs = []
        for eps in eps_grid:
            r = tuned_accuracy_at_epsilon(arch, train, val, test, eps, spec, rng.child(f"{name}/{eps}"))
            print(f"{name:8s} eps {eps:>6}  test {r.test_accuracy:.4f}  (lr {r.learning_rate}, clip {r.clip_l2})")
            accs.append(r.test_accuracy)
        curves[name] = AccuracyCurve(np.array(eps_grid), np.array(accs), name)
    print("crossover:", crossover_epsilon(curves["simple"], curves["complex"]).to_dict())
    if args.out:
        for p in emit_curve(curves, args.out, f"seed{args.seed}"):
            print("wrote", p)


if __name__ == "__main__":
    main()
