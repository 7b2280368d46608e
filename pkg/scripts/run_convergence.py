"""Synthetic convergence study: DP-SGD accuracy and distance to the SGD path vs input size.

    python scripts/run_convergence.py --expansions 1,10,100 --seeds 20
"""

import argparse
import itertools
import json

from privaware.workflows import SynthConfig, sign_test_p, synthetic_convergence_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--expansions", default="1,10,100")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--noise", type=float, default=SynthConfig.noise_multiplier)
    ap.add_argument("--epochs", type=int, default=SynthConfig.epochs)
    ap.add_argument("--json", help="write the summary here as well")
    args = ap.parse_args()

    expansions = [int(t) for t in args.expansions.split(",")]
    cfg = SynthConfig(noise_multiplier=args.noise, epochs=args.epochs)
    runs = synthetic_convergence_study(expansions, range(args.seeds), cfg)

    summary = {}
    for e, r in runs.items():
        summary[e] = {"epsilon": r.epsilon, "dp_accuracy": float(r.accuracy.mean()),
                      "sgd_accuracy": float(r.sgd_accuracy.mean()), "final_distance": float(r.final_distance.mean())}
        print(f"expansion {e:4d}  eps {r.epsilon:.3f}  dp acc {r.accuracy.mean():.4f}  "
              f"sgd acc {r.sgd_accuracy.mean():.4f}  cos dist {r.final_distance.mean():.4f}")
    for a, b in itertools.pairwise(expansions):
        wins = int((runs[a].accuracy > runs[b].accuracy).sum())
        print(f"{a} beats {b} in {wins}/{args.seeds} seeds (sign test p = {sign_test_p(wins, args.seeds):.2g})")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
