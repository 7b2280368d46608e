"""Experiment building blocks shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .accountant import DpSgdSetting, dpsgd_epsilon, noise_for_epsilon
from .arch_search import FitnessOracle, Individual, SearchSpace, paas
from .data import Dataset, split, synthetic_sum_dataset
from .models import Architecture, Layer, Model, TrainConfig, dpsgd_train, evaluate, init_model, mlp, sgd_train
from .numerics import RngStream
from .theory import AccuracyCurve, convergence_trace


# --- fixtures ---------------------------------------------------------------------------

def synthetic_crossover_curves() -> tuple[AccuracyCurve, AccuracyCurve]:
    """Simple model flat at 0.80; complex model piecewise linear through
    (0.1, 0.50), (5, 0.80), (10, 0.95). They cross at epsilon = 5."""
    grid = np.round(np.arange(1, 101) * 0.1, 10)
    simple = AccuracyCurve(grid, np.full(grid.size, 0.80), "simple")
    complex_ = AccuracyCurve(grid, np.interp(grid, [0.1, 5.0, 10.0], [0.50, 0.80, 0.95]), "complex")
    return simple, complex_


ADULT_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1000.0)
ADULT_SIMPLE = (0.760, 0.765, 0.772, 0.790, 0.800, 0.808, 0.815, 0.820, 0.823, 0.825, 0.826, 0.826)
ADULT_COMPLEX = (0.752, 0.755, 0.760, 0.770, 0.782, 0.795, 0.808, 0.817, 0.829, 0.838, 0.845, 0.848)


def adult_crossover_curves() -> tuple[AccuracyCurve, AccuracyCurve]:
    """Recorded accuracy-vs-epsilon constants for a simple and a complex Adult model."""
    return (AccuracyCurve(ADULT_GRID, ADULT_SIMPLE, "simple"),
            AccuracyCurve(ADULT_GRID, ADULT_COMPLEX, "complex"))


def planted_space() -> tuple[SearchSpace, dict, Callable[[Individual], float]]:
    """A 3 x 5 x 3 = 45 member space with a unique fitness maximum."""
    space = SearchSpace({"a": [0, 1, 2], "b": [0, 1, 2, 3, 4], "c": [0, 1, 2]})
    opt = {"a": 1, "b": 3, "c": 2}

    def fitness(ind: Individual) -> float:
        g = ind.genes
        return 1.0 - 0.05 * sum(abs(g[k] - opt[k]) for k in opt)

    return space, opt, fitness


# --- synthetic convergence study ------------------------------------------------------------

@dataclass
class SynthConfig:
    n: int = 5000
    base_dim: int = 10
    train_fraction: float = 0.8
    noise_multiplier: float = 4.0
    clip_l2: float = 1.0
    epochs: int = 20
    learning_rate: float = 0.5
    batch: int = 100
    l2_reg: float = 1e-4


def synthetic_task(n: int, base_dim: int, expansion: int, rng: RngStream, train_fraction: float = 0.8):
    ds = synthetic_sum_dataset(n, base_dim, expansion, rng.child("data"))
    ds = split(ds, (train_fraction, 0.0, 1.0 - train_fraction), rng.child("split"))
    return ds.part("train"), ds.part("test")


def logistic_arch(m: int) -> Architecture:
    return Architecture(m, (Layer(1, "sigmoid"),))


@dataclass
class ConvergenceRun:
    expansion: int
    accuracy: np.ndarray  # DP-SGD test accuracy per seed
    sgd_accuracy: np.ndarray
    final_distance: np.ndarray  # per seed
    mean_trace: np.ndarray  # mean cosine distance per epoch
    epsilon: float


def synthetic_convergence_study(expansions: Sequence[int], seeds: Sequence[int],
                                cfg: SynthConfig = SynthConfig()) -> dict[int, ConvergenceRun]:
    """Single sigmoid unit trained with SGD and DP-SGD from the same start, per input size.

    Every expansion uses identical (z, C, epochs, batch) and therefore the same
    epsilon.
    """
    out = {}
    for e in expansions:
        acc, sacc, dist, traces = [], [], [], []
        eps = math.nan
        for s in seeds:
            rng = RngStream(s)
            tr, te = synthetic_task(cfg.n, cfg.base_dim, e, rng, cfg.train_fraction)
            model = init_model(logistic_arch(tr.m), rng.child("init"))
            tc = TrainConfig(cfg.learning_rate, cfg.batch, cfg.epochs, clip_l2=cfg.clip_l2,
                             noise_multiplier=cfg.noise_multiplier, l2_reg=cfg.l2_reg, seed=s)
            trace, m_sgd, m_dp, eps = convergence_trace(model, tr.X, tr.y, tc, rng.child("train"))
            acc.append(evaluate(m_dp, te.X, te.y))
            sacc.append(evaluate(m_sgd, te.X, te.y))
            dist.append(trace[-1][1])
            traces.append([d for _, d in trace])
        out[e] = ConvergenceRun(e, np.array(acc), np.array(sacc), np.array(dist),
                                np.mean(traces, axis=0), eps)
    return out


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial sign test p-value for ``wins`` successes out of ``n``."""
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


# --- model training closures ----------------------------------------------------------------

@dataclass
class TrainSpec:
    """How fitness trainings and final trainings are run."""

    learning_rate: float = 0.1
    batch: int = 100
    epochs: int = 5
    clip_l2: float = 1.0
    noise_multiplier: float = 2.0
    delta: float = 1e-5
    l2_reg: float = 0.0

    def config(self, dp: bool, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch, self.epochs,
                           clip_l2=self.clip_l2 if dp else None,
                           noise_multiplier=self.noise_multiplier if dp else None,
                           l2_reg=self.l2_reg, delta=self.delta, seed=seed)


def train_arch(arch: Architecture, train: Dataset, spec: TrainSpec, dp: bool, rng: RngStream) -> tuple[Model, float]:
    model = init_model(arch, rng.child("init"))
    if dp:
        return dpsgd_train(model, train.X, train.y, spec.config(True), rng.child("train"))
    return sgd_train(model, train.X, train.y, spec.config(False), rng.child("train")), math.inf


def fcn_fitness(train: Dataset, val: Dataset, spec: TrainSpec, dp: bool, rng: RngStream) -> Callable[[Individual], float]:
    """Fitness closure: realize, train (DP or not) and score on the validation part."""
    def fit(ind: Individual) -> float:
        model, _ = train_arch(ind.realize(), train, spec, dp, rng.child("fit/" + repr(ind.key)))
        return evaluate(model, val.X, val.y)
    return fit


def training_epsilon(spec: TrainSpec, n: int) -> float:
    return dpsgd_epsilon(DpSgdSetting(n, min(spec.batch, n), spec.epochs, spec.noise_multiplier,
                                      spec.clip_l2, spec.delta))


@dataclass
class WorkflowOutcome:
    name: str
    genes: dict
    architecture: dict
    test_accuracy: float
    final_epsilon: float
    search_epsilon: float | None
    unique_trainings: int
    trace: list = field(default_factory=list)


def compare_workflows(ds: Dataset, space: SearchSpace, spec: TrainSpec, gens_l: int, pop_k: int,
                      eps_prime: float, seed: int, workers: int = 1) -> dict[str, WorkflowOutcome]:
    """Standard workflow (search with non-private fitness) vs privacy-aware workflow
    (search with DP fitness); both finish with the same DP-SGD training."""
    train, val, test = ds.part("train"), ds.part("val"), ds.part("test")
    if train.n == 0 or val.n == 0 or test.n == 0:
        raise ValueError("dataset needs nonempty train, val and test parts")
    eps_train = training_epsilon(spec, train.n)
    master = RngStream(seed)
    out = {}
    for name, dp in (("STW", False), ("PAW", True)):
        rng = master.child(name)
        oracle = FitnessOracle(fcn_fitness(train, val, spec, dp, rng.child("fitness")), val.n, eps_prime,
                               eps_train if dp else math.inf)
        res = paas(space, gens_l, pop_k, oracle, rng.child("search"), workers=workers)
        final, eps = train_arch(res.best.realize(), train, spec, True, rng.child("final"))
        out[name] = WorkflowOutcome(name, dict(res.best.genes), res.best.realize().to_dict(),
                                    evaluate(final, test.X, test.y), eps,
                                    res.total_epsilon if dp else None, res.unique_trainings, res.trace)
    return out


# --- accuracy vs epsilon --------------------------------------------------------------------

def simple_and_complex(m: int, hidden: Sequence[int] = (256, 128)) -> dict[str, Architecture]:
    return {"simple": logistic_arch(m), "complex": mlp(m, list(hidden), 1, "relu")}


def accuracy_at_epsilon(arch: Architecture, train: Dataset, test: Dataset, epsilon: float,
                        spec: TrainSpec, rng: RngStream) -> tuple[float, float]:
    """Test accuracy after DP-SGD calibrated to ``epsilon`` (plain SGD when infinite).

    Returns (accuracy, achieved epsilon).
    """
    if math.isinf(epsilon):
        model, eps = train_arch(arch, train, spec, False, rng)
    else:
        z = noise_for_epsilon(epsilon, train.n, min(spec.batch, train.n), spec.epochs, spec.delta)
        model, eps = train_arch(arch, train, replace(spec, noise_multiplier=z), True, rng)
    return evaluate(model, test.X, test.y), eps


LR_GRID = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0)
CLIP_GRID = (0.1, 0.3, 1.0)


@dataclass
class TunedResult:
    test_accuracy: float
    val_accuracy: float
    learning_rate: float
    clip_l2: float | None
    epsilon: float


def tuned_accuracy_at_epsilon(arch: Architecture, train: Dataset, val: Dataset, test: Dataset, epsilon: float,
                              spec: TrainSpec, rng: RngStream, lr_grid: Sequence[float] = LR_GRID,
                              clip_grid: Sequence[float] = CLIP_GRID) -> TunedResult:
    """Pick (learning rate, clip norm) on ``val`` and report test accuracy of that choice.

    Every architecture gets the same grid. The clip norm only matters under
    DP, so the noise-free case searches learning rates alone. The privacy
    cost of the selection itself is not accounted.
    """
    clips = [None] if math.isinf(epsilon) else list(clip_grid)
    best = None
    for lr in lr_grid:
        for clip in clips:
            s = replace(spec, learning_rate=lr, clip_l2=clip if clip is not None else spec.clip_l2)
            r = rng.child(f"lr={lr}/clip={clip}")
            if math.isinf(epsilon):
                model, eps = train_arch(arch, train, s, False, r)
            else:
                z = noise_for_epsilon(epsilon, train.n, min(s.batch, train.n), s.epochs, s.delta)
                model, eps = train_arch(arch, train, replace(s, noise_multiplier=z), True, r)
            v = evaluate(model, val.X, val.y)
            if best is None or v > best[0]:
                best = (v, lr, clip, eps, model)
    v, lr, clip, eps, model = best
    return TunedResult(evaluate(model, test.X, test.y), v, lr, clip, eps)


def accuracy_curves(archs: dict[str, Architecture], train: Dataset, test: Dataset, eps_grid: Sequence[float],
                    spec: TrainSpec, seeds: Sequence[int]) -> dict[str, AccuracyCurve]:
    """Mean test accuracy over seeds for each architecture at each grid epsilon."""
    curves = {}
    for name, arch in archs.items():
        means = []
        for eps in eps_grid:
            accs = [accuracy_at_epsilon(arch, train, test, eps, spec, RngStream(s).child(f"{name}/{eps}"))[0]
                    for s in seeds]
            means.append(float(np.mean(accs)))
        curves[name] = AccuracyCurve(np.asarray(eps_grid, dtype=float), np.array(means), name)
    return curves
