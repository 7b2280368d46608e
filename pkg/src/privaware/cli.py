"""Command-line experiment runner.

Every subcommand accepts ``--config FILE`` (an INI file whose section named
after the subcommand sets option defaults), ``--seed``, ``--workers`` and
``--out``. Command-line flags win over the file. Exit codes: 0 success,
2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import accountant as acc
from .arch_search import ConfigError, FitnessOracle, SearchSpace, fcn_space, mgrs, paas, rs_search
from .data import DataError, Dataset, Manifest, load_csv, normalize, one_hot, save_csv, split, synthetic_sum_dataset
from .feature_selection import SucTable, cfs_ga_run, cfs_greedy, merit, pafs, random_subset
from .models import Architecture, evaluate, mlp, param_count, rwt_freeze
from .numerics import RngStream
from .theory import (
    AccuracyCurve,
    LinearInstance,
    crossover_epsilon,
    expected_dp_error_full,
    expected_dp_error_reduced,
    fit_eps_vs_n,
    lemma1_threshold,
    mc_expected_error,
)
from .workflows import (
    TrainSpec,
    accuracy_curves,
    adult_crossover_curves,
    compare_workflows,
    fcn_fitness,
    simple_and_complex,
    synthetic_crossover_curves,
    train_arch,
    training_epsilon,
)

EXIT_CONFIG, EXIT_RUNTIME = 2, 3
_NOT_HASHED = {"out", "workers", "config", "command", "func"}


class UsageError(Exception):
    pass


def _floats(s: str) -> list[float]:
    try:
        return [float(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s: str) -> list[int]:
    try:
        return [int(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def config_hash(config: dict) -> str:
    doc = {k: v for k, v in sorted(config.items()) if k not in _NOT_HASHED}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


class RunReport:
    """Collects metrics and the privacy ledger of one run and writes them as JSON."""

    def __init__(self, task: str, config: dict):
        self.task = task
        self.config = {k: v for k, v in config.items() if k not in ("func", "command")}
        self.hash = config_hash(self.config)
        self.metrics: dict = {}
        self.privacy: dict = {}
        self.artifacts: list[str] = []
        self.error: str | None = None
        self._t0 = time.perf_counter()

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "config": self.config,
            "config_hash": self.hash,
            "metrics": self.metrics,
            "privacy": self.privacy,
            "artifacts": self.artifacts,
            "wall_clock_s": time.perf_counter() - self._t0,
        }
        if self.error is not None:
            d["error"] = self.error
        return _jsonable(d)

    def write(self, out: str | None) -> str | None:
        text = json.dumps(self.to_dict(), indent=2)
        if out is None:
            print(text)
            return None
        path = Path(out) / f"{self.task}-{self.hash}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
        print(text)
        return str(path)


def emit_curve(curves: dict[str, AccuracyCurve], out: str, tag: str) -> list[str]:
    """One epsilon,metric CSV per curve, named from the curve name and ``tag``."""
    if not curves:
        raise ValueError("nothing to emit")
    Path(out).mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(curves):
        p = Path(out) / f"curve-{name}-{tag}.csv"
        curves[name].to_csv(p)
        paths.append(str(p))
    return paths


# --- dataset resolution -------------------------------------------------------------------

def _dataset(args) -> Dataset:
    if getattr(args, "manifest", None):
        ds = Manifest.load(args.manifest).materialize()
    elif getattr(args, "data", None):
        schema = dict(kv.split("=", 1) for kv in args.schema.split(",")) if args.schema else {}
        ds = load_csv(args.data, args.label, schema, args.task)
        ds = one_hot(ds)
        ds = split(ds, args.split, RngStream(args.seed, 2))
    else:
        raise UsageError("give --data or --manifest")
    if getattr(args, "normalize", False):
        ds = normalize(ds, ds.part("train"))
    return ds


def _spec(args) -> TrainSpec:
    return TrainSpec(args.lr, args.batch, args.epochs, args.clip, args.noise, args.delta, args.l2)


def _classifier(m: int, hidden: list[int], n_classes: int, activation: str) -> Architecture:
    # binary tasks get a single sigmoid unit
    return mlp(m, hidden, 1 if n_classes <= 2 else n_classes, activation)


# --- subcommands ---------------------------------------------------------------------------

def cmd_accountant(args, report: RunReport):
    if args.workflow == "dpsgd":
        setting = acc.DpSgdSetting(args.n, args.batch, args.epochs, args.noise, 1.0, args.delta)
        res = acc.dpsgd_privacy(setting, method=args.method)
        report.metrics.update(res)
        report.privacy = {"epsilon": res["epsilon"], "delta": args.delta}
    elif args.workflow in ("advanced", "pafs", "paas"):
        eps = acc.advanced_composition(args.eps, args.c, args.delta_prime)
        report.metrics.update(epsilon=eps, c=args.c)
        report.privacy = {"epsilon": eps, "delta_prime": args.delta_prime, "c": args.c}
    elif args.workflow == "rs":
        ep = acc.rs_epsilon_prime(args.x, args.v, args.k[0], args.delta_fail)
        total = acc.rs_total_budget(args.eps, ep)
        report.metrics.update(epsilon=total, eps_prime=ep)
        report.privacy = {"epsilon": total}
    elif args.workflow == "mgrs":
        per = acc.mgrs_generation_budgets(args.eps, args.k, args.x, args.v, args.delta_fail)
        total = acc.mgrs_total_budget(per)
        report.metrics.update(epsilon=total, per_generation=per)
        report.privacy = {"epsilon": total}


def cmd_synth(args, report: RunReport):
    ds = synthetic_sum_dataset(args.n, args.base_dim, args.expansion, RngStream(args.seed, 1))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"synth-{report.hash}.csv"
    save_csv(ds, csv_path)
    man = Manifest(path=str(csv_path), label="label", schema={}, split_fractions=tuple(args.split),
                   split_seed=args.seed)
    man_path = out / f"synth-{report.hash}.manifest.json"
    man.save(man_path)
    report.artifacts += [str(csv_path), str(man_path)]
    report.metrics.update(n=ds.n, features=ds.m, positive_rate=float(ds.y.mean()))


def cmd_train(args, report: RunReport):
    ds = _dataset(args)
    train, test = ds.part("train"), ds.part("test")
    if train.n == 0 or test.n == 0:
        raise UsageError("dataset needs nonempty train and test parts")
    arch = _classifier(ds.m, args.hidden, ds.n_classes, args.activation)
    if args.freeze_last:
        arch = rwt_freeze(arch, args.freeze_last)
    spec = _spec(args)
    if args.dp and args.target_epsilon:
        spec.noise_multiplier = acc.noise_for_epsilon(args.target_epsilon, train.n, min(spec.batch, train.n),
                                                      spec.epochs, spec.delta)
    model, eps = train_arch(arch, train, spec, args.dp, RngStream(args.seed))
    total, trainable = param_count(arch)
    report.metrics.update(accuracy=evaluate(model, test.X, test.y), params=total, trainable=trainable,
                          noise_multiplier=spec.noise_multiplier if args.dp else None)
    report.privacy = {"epsilon": eps, "delta": spec.delta, "c": 1}
    if args.out:
        p = Path(args.out) / f"model-{report.hash}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        model.save(p)
        report.artifacts.append(str(p))


def cmd_fselect(args, report: RunReport):
    ds = _dataset(args)
    train = ds.part("train")
    cand = list(range(ds.m))
    rng = RngStream(args.seed, 3)
    if args.method in ("cfs-greedy", "cfs-ga"):
        table = SucTable.from_data(train.X, train.y, eps_h=args.eps_h, rng=rng.child("suc") if args.eps_h else None)
        if args.method == "cfs-greedy":
            sel = cfs_greedy(cand, args.k, table)
        else:
            sel = cfs_ga_run(cand, args.pop, args.gens, args.alpha, args.p_co, args.p_mu, table, rng).best
        report.metrics.update(selected=list(sel), merit=merit(sel, table) if sel else None)
        report.privacy = {"epsilon": None if args.eps_h is None else "entropy-noised",
                          "eps_h": args.eps_h}
    elif args.method == "random":
        sel = random_subset(cand, args.k, rng)
        report.metrics.update(selected=list(sel))
    else:
        val = ds.part("val")
        spec = _spec(args)
        eps_train = training_epsilon(spec, train.n)

        def fitness(fs):
            sub_tr, sub_val = train.select(fs), val.select(fs)
            arch = _classifier(len(fs), [], ds.n_classes, "relu")
            model, _ = train_arch(arch, sub_tr, spec, True, rng.child("fit/" + repr(fs)))
            return evaluate(model, sub_val.X, sub_val.y)

        res = pafs(cand, args.pop, args.gens, fitness, rng.child("ga"), eps_train, args.delta_prime,
                   args.alpha, args.p_co, args.p_mu, workers=args.workers)
        report.metrics.update(selected=list(res.best), dp_accuracy=res.accuracy,
                              unique_trainings=res.unique_trainings)
        report.privacy = {"epsilon": res.total_epsilon, "eps_per_training": eps_train,
                          "c": res.unique_trainings, "delta_prime": args.delta_prime}


def cmd_asearch(args, report: RunReport):
    ds = _dataset(args)
    train, val = ds.part("train"), ds.part("val")
    if args.space:
        space = SearchSpace.from_ini(args.space)
        if space.input_dim is None:
            space.input_dim = ds.m
    else:
        space = fcn_space(ds.m, max(2, ds.n_classes), dropout=0.0, trainable_genes=args.method != "paas")
    space.n_out = max(2, ds.n_classes)
    spec = _spec(args)
    rng = RngStream(args.seed, 4)
    if args.method == "compare":
        res = compare_workflows(ds, space, spec, args.gens, args.pop, args.eps_prime, args.seed, args.workers)
        report.metrics.update({k: vars(v) for k, v in res.items()})
        report.privacy = {"final_epsilon": res["PAW"].final_epsilon,
                          "PAW_search_epsilon": res["PAW"].search_epsilon}
        return
    eps_train = training_epsilon(spec, train.n)
    oracle = FitnessOracle(fcn_fitness(train, val, spec, True, rng.child("fitness")), val.n, args.eps_prime, eps_train,
                           spec.delta)
    if args.method == "paas":
        res = paas(space, args.gens, args.pop, oracle, rng, workers=args.workers, delta_prime=args.delta_prime)
    elif args.method == "rs":
        res = rs_search(space, args.k[0], oracle, rng, x=args.x, delta_fail=args.delta_fail, v=args.v,
                        workers=args.workers)
    else:
        res = mgrs(space, args.k, args.p_mutate, oracle, rng, x=args.x, delta_fail=args.delta_fail, v=args.v,
                   workers=args.workers)
    report.metrics.update(best=res.best.genes, architecture=res.best.realize().to_dict(), trace=res.trace,
                          unique_trainings=res.unique_trainings)
    report.privacy = {"epsilon": res.total_epsilon, "c": res.ledger.c, "eps_train": eps_train,
                      "detail": res.budget_detail}


def cmd_crossover(args, report: RunReport):
    if args.fixture == "synthetic":
        simple, complex_ = synthetic_crossover_curves()
    elif args.fixture == "adult":
        simple, complex_ = adult_crossover_curves()
    elif args.simple and args.complex:
        simple, complex_ = AccuracyCurve.from_csv(args.simple, "simple"), AccuracyCurve.from_csv(args.complex, "complex")
    else:
        raise UsageError("give --fixture or both --simple and --complex")
    res = crossover_epsilon(simple, complex_, higher_is_better=not args.lower_is_better)
    report.metrics.update(res.to_dict())


def cmd_lemma(args, report: RunReport):
    inst = LinearInstance(args.theta, args.x, args.y, args.sigma, args.sigma_prime)
    rng = RngStream(args.seed, 5)
    mc_full = mc_expected_error("full", inst, args.trials, rng.child("mc"))
    mc_red = mc_expected_error("reduced", inst, args.trials, rng.child("mc"))
    report.metrics.update(
        c=inst.c,
        threshold=lemma1_threshold(inst),
        theta_m=float(inst.theta[-1]),
        full={"closed_form": expected_dp_error_full(inst), "mc_mean": mc_full[0], "mc_stderr": mc_full[1]},
        reduced={"closed_form": expected_dp_error_reduced(inst), "mc_mean": mc_red[0], "mc_stderr": mc_red[1]},
        reduced_no_worse=expected_dp_error_reduced(inst) <= expected_dp_error_full(inst),
    )


def cmd_fitcurve(args, report: RunReport):
    import csv
    with open(args.points, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["n", "epsilon"]:
        raise UsageError(f"{args.points}: expected header 'n,epsilon'")
    try:
        pts = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    except (ValueError, IndexError) as e:
        raise UsageError(f"{args.points}: bad row ({e})") from None
    fit = fit_eps_vs_n(pts)
    report.metrics.update(alpha=fit.alpha, beta=fit.beta, residual=fit.residual, alpha_clamped=fit.alpha_clamped)


def cmd_curve(args, report: RunReport):
    ds = _dataset(args)
    train, test = ds.part("train"), ds.part("test")
    archs = simple_and_complex(ds.m, args.hidden)
    curves = accuracy_curves(archs, train, test, args.eps_grid, _spec(args), range(args.seed, args.seed + args.repeats))
    res = crossover_epsilon(curves["simple"], curves["complex"])
    report.metrics.update(curves={k: {"epsilon": v.epsilon, "metric": v.metric} for k, v in curves.items()},
                          crossover=res.to_dict())
    if args.out:
        report.artifacts += emit_curve(curves, args.out, report.hash)


# --- parser --------------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="INI file; the section named after the subcommand sets defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory for reports and artifacts")


def _add_data(p):
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--label", default="label")
    p.add_argument("--schema", default="", help="name=categorical,... for non-numeric columns")
    p.add_argument("--task", default="classification", choices=["classification", "regression"])
    p.add_argument("--split", type=_floats, default=[0.8, 0.1, 0.1])
    p.add_argument("--normalize", action="store_true")


def _add_training(p, epochs=5):
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--l2", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privaware", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("accountant", help="privacy budget of a DP-SGD run or a search workflow")
    _add_common(p)
    p.add_argument("--workflow", default="dpsgd", choices=["dpsgd", "advanced", "pafs", "paas", "rs", "mgrs"])
    p.add_argument("--n", type=int, default=60000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--epochs", type=float, default=60)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--method", default="tight", choices=["tight", "classic"])
    p.add_argument("--eps", type=float, default=0.1, help="per-training epsilon")
    p.add_argument("--c", type=int, default=1, help="number of unique trainings")
    p.add_argument("--delta-prime", type=float, default=acc.DEFAULT_DELTA_PRIME)
    p.add_argument("--x", type=float, default=0.05)
    p.add_argument("--v", type=int, default=5000)
    p.add_argument("--k", type=_ints, default=[400], help="candidates (comma list for MGRS generations)")
    p.add_argument("--delta-fail", type=float, default=1e-4)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("synth", help="write a synthetic-sum dataset and its manifest")
    _add_common(p)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--base-dim", type=int, default=10)
    p.add_argument("--expansion", type=int, default=1)
    p.add_argument("--split", type=_floats, default=[0.8, 0.1, 0.1])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one FCN with SGD or DP-SGD")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--hidden", type=_ints, default=[])
    p.add_argument("--activation", default="relu", choices=["relu", "sigmoid", "tanh"])
    p.add_argument("--dp", action="store_true")
    p.add_argument("--target-epsilon", type=float, default=None)
    p.add_argument("--freeze-last", type=int, default=0, help="train only the last N layers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fselect", help="feature selection")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--method", default="cfs-greedy", choices=["cfs-greedy", "cfs-ga", "pafs", "random"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--eps-h", type=float, default=None, help="entropy noise budget for private SUC")
    p.add_argument("--pop", type=int, default=20)
    p.add_argument("--gens", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--p-co", type=float, default=0.5)
    p.add_argument("--p-mu", type=float, default=0.3)
    p.add_argument("--delta-prime", type=float, default=acc.DEFAULT_DELTA_PRIME)
    p.set_defaults(func=cmd_fselect)

    p = sub.add_parser("asearch", help="architecture search")
    _add_common(p)
    _add_data(p)
    _add_training(p, epochs=2)
    p.add_argument("--method", default="paas", choices=["paas", "rs", "mgrs", "compare"])
    p.add_argument("--space", help="search space INI file")
    p.add_argument("--pop", type=int, default=10)
    p.add_argument("--gens", type=int, default=6)
    p.add_argument("--k", type=_ints, default=[40, 20, 10], help="RS k, or MGRS generation sizes")
    p.add_argument("--p-mutate", type=float, default=0.7)
    p.add_argument("--eps-prime", type=float, default=0.02)
    p.add_argument("--delta-prime", type=float, default=acc.DEFAULT_DELTA_PRIME)
    p.add_argument("--x", type=float, default=None, help="acceptable loss proportion for RS/MGRS budgets")
    p.add_argument("--v", type=int, default=None)
    p.add_argument("--delta-fail", type=float, default=1e-4)
    p.set_defaults(func=cmd_asearch)

    p = sub.add_parser("crossover", help="crossover epsilon of two accuracy curves")
    _add_common(p)
    p.add_argument("--simple", help="CSV with header epsilon,metric")
    p.add_argument("--complex", help="CSV with header epsilon,metric")
    p.add_argument("--fixture", choices=["synthetic", "adult"])
    p.add_argument("--lower-is-better", action="store_true")
    p.set_defaults(func=cmd_crossover)

    p = sub.add_parser("lemma", help="closed-form and Monte Carlo errors of the full and reduced linear model")
    _add_common(p)
    p.add_argument("--theta", type=_floats, default=[1.0, 1.0])
    p.add_argument("--x", type=_floats, default=[1.0, 1.0])
    p.add_argument("--y", type=float, default=3.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--sigma-prime", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=1_000_000)
    p.set_defaults(func=cmd_lemma)

    p = sub.add_parser("fitcurve", help="fit epsilon = ln(alpha + beta/n)")
    _add_common(p)
    p.add_argument("--points", required=True, help="CSV with header n,epsilon")
    p.set_defaults(func=cmd_fitcurve)

    p = sub.add_parser("curve", help="accuracy vs epsilon for a simple and a complex FCN")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--hidden", type=_ints, default=[256, 128], help="hidden widths of the complex model")
    p.add_argument("--eps-grid", type=_floats, default=[0.5, 1.0, 5.0, 10.0, 100.0])
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_curve)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if not args.config:
        return args
    cp = configparser.ConfigParser()
    try:
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
    except configparser.Error as e:
        raise UsageError(f"{args.config}: {e}") from None
    section = args.command
    unknown_sections = set(cp.sections()) - {section}
    if unknown_sections:
        raise UsageError(f"{args.config}: unknown sections {sorted(unknown_sections)}")
    if section not in cp:
        return args
    sub = next(a for a in ap._subparsers._group_actions[0].choices.values() if a.prog.endswith(" " + section))
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in cp[section].items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{args.config}: unknown key {key!r} in [{section}]")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = cp[section].getboolean(key)
            continue
        try:
            val = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{args.config}: bad value for {key!r}: {e}") from None
        if action.choices is not None and val not in action.choices:
            raise UsageError(f"{args.config}: {key!r} must be one of {list(action.choices)}")
        defaults[dest] = val
    sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
    except UsageError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # argparse reports its own errors with code 2
        return int(e.code or 0)
    report = RunReport(args.command, vars(args))
    try:
        args.func(args, report)
    except (UsageError, ConfigError, DataError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure with a partial report
        report.error = f"{type(e).__name__}: {e}"
        try:
            report.write(args.out)
        finally:
            print(f"runtime error: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    report.write(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
