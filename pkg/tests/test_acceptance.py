"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest

from privaware.accountant import DpSgdSetting, advanced_composition, dpsgd_epsilon, rs_total_budget
from privaware.data import split, synthetic_sum_dataset
from privaware.arch_search import FitnessOracle, paas, rs_search
from privaware.feature_selection import SucTable, cfs_ga, cfs_greedy, merit
from privaware.mechanisms import gaussian_perturb
from privaware.models import (
    Architecture,
    Layer,
    TrainConfig,
    dpsgd_train,
    init_model,
    mlp,
    param_count,
    per_example_grads,
    per_example_losses,
    rwt_freeze,
    sgd_train,
)
from privaware.numerics import RngStream
from privaware.theory import (
    AccuracyCurve,
    LinearInstance,
    crossover_epsilon,
    expected_dp_error_full,
    expected_dp_error_reduced,
    fit_eps_vs_n,
    lemma1_threshold,
    mc_error_sweep,
    mc_expected_error,
)
from privaware.workflows import (
    SynthConfig,
    TrainSpec,
    adult_crossover_curves,
    planted_space,
    sign_test_p,
    simple_and_complex,
    synthetic_convergence_study,
    synthetic_crossover_curves,
    tuned_accuracy_at_epsilon,
)


def report(msg):
    print(f"  {msg}")


# --- 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "DP-SGD accountant anchors within +-10%")
def test_accountant_anchors():
    for batch, epochs, lo, hi in ((200, 70, 0.95, 1.16), (100, 150, 0.98, 1.20)):
        t0 = time.perf_counter()
        eps = dpsgd_epsilon(DpSgdSetting(60000, batch, epochs, 2.0, 1.0, 1e-5))
        dt = time.perf_counter() - t0
        report(f"batch={batch} epochs={epochs}: eps={eps:.4f} ({dt:.3f}s)")
        assert lo <= eps <= hi
        assert dt < 1.0


# --- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "advanced composition 49.40 and RS total 3.51")
def test_composition_values():
    total = advanced_composition(0.1, 2300, 1e-6)
    # independent evaluation of sqrt(2c ln(1/d')) e + c e (e^e - 1)
    oracle = math.sqrt(2 * 2300 * math.log(1e6)) * 0.1 + 2300 * 0.1 * math.expm1(0.1)
    report(f"advanced composition = {total:.4f}")
    assert total == pytest.approx(oracle, rel=1e-12)
    assert abs(total - 49.40) <= 0.01
    assert rs_total_budget(2.11, 0.175) == pytest.approx(3.51, abs=1e-12)


# --- 3 ---------------------------------------------------------------------------

def _random_instance(rng: RngStream) -> LinearInstance:
    m = int(rng.integers(2, 6))
    signs = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    x = signs * rng.random(m) + signs * 0.5  # |x_i| in [0.5, 1.5]
    x[-1] = signs[-1] * (1.0 + rng.random())  # |x_m| in [1, 2]
    theta = rng.normal(0.0, 1.0, size=m)
    sigma = 0.1 + 2.9 * rng.random()
    y = float(theta @ x)  # c = 0
    return LinearInstance(theta, x, y, sigma, sigma)


@pytest.mark.criterion(3, "reduced model no worse iff |theta_m| <= sigma (100 instances, 1e6 MC trials)")
def test_lemma_threshold_mc():
    master = RngStream(3)
    trials = 1_000_000
    worst_flip = 0.0
    for i in range(100):
        inst = _random_instance(master.child(f"inst/{i}"))
        s = inst.sigma
        assert lemma1_threshold(inst) == pytest.approx(s, rel=1e-12)
        # closed forms against the brute-force oracle at the drawn theta_m
        full, se_f = mc_expected_error("full", inst, trials, master.child(f"mc/{i}"))
        red, se_r = mc_expected_error("reduced", inst, trials, master.child(f"mc/{i}"))
        assert abs(full - expected_dp_error_full(inst)) < 6 * se_f
        assert abs(red - expected_dp_error_reduced(inst)) < 6 * se_r + 1e-12
        sweep_pts = [0.5 * s, 0.98 * s, 1.02 * s, 1.5 * s]
        sweep = mc_error_sweep(inst, sweep_pts, trials, master.child(f"sweep/{i}"))
        assert list(sweep.reduced_no_worse) == [True, True, False, False]
        assert sweep.flip is not None
        rel = abs(sweep.flip - s) / s
        worst_flip = max(worst_flip, rel)
        assert rel <= 0.02
    report(f"worst relative flip error {worst_flip:.4%}")


# --- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "E||z||^2 = sigma^2 m within 1.5%")
def test_gaussian_noise_norm():
    rng = RngStream(4)
    draws = 100_000
    for m in (10, 100, 1000):
        for sigma in (0.5, 1.0, 2.0):
            total = 0.0
            chunk = max(1, 10_000_000 // m)
            done = 0
            while done < draws:
                b = min(chunk, draws - done)
                z = gaussian_perturb(np.zeros((b, m)), sigma, rng)
                total += float((z * z).sum())
                done += b
            mean = total / draws
            assert abs(mean - sigma ** 2 * m) <= 0.015 * sigma ** 2 * m, (m, sigma, mean)


# --- 5 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(5, "synthetic convergence ordering over input sizes (20 seeds, sign tests)")
def test_synthetic_convergence_ordering():
    expansions = (1, 10, 100)
    seeds = range(20)
    runs = synthetic_convergence_study(expansions, seeds, SynthConfig())
    eps = {runs[e].epsilon for e in expansions}
    assert len(eps) == 1  # equal budgets
    for e in expansions:
        r = runs[e]
        report(f"expansion {e:>3}: acc {r.accuracy.mean():.4f}  dist {r.final_distance.mean():.4f}  eps {r.epsilon:.3f}")
    for a, b in itertools.pairwise(expansions):
        ra, rb = runs[a], runs[b]
        assert ra.accuracy.mean() > rb.accuracy.mean()
        assert ra.final_distance.mean() < rb.final_distance.mean()
        wins_acc = int(np.sum(ra.accuracy > rb.accuracy))
        wins_dist = int(np.sum(ra.final_distance < rb.final_distance))
        assert sign_test_p(wins_acc, len(seeds)) < 0.05
        assert sign_test_p(wins_dist, len(seeds)) < 0.05


# --- 6 ---------------------------------------------------------------------------

def _random_net(rng: RngStream, i: int):
    hidden_acts = ("relu", "sigmoid", "tanh", "linear")
    kind = i % 4
    m = int(rng.integers(2, 6))
    hidden = [Layer(int(rng.integers(2, 6)), hidden_acts[(i + j) % 4]) for j in range(int(rng.integers(1, 3)))]
    n = 7
    X = rng.normal(0.0, 1.0, size=(n, m))
    if kind == 0:
        k = int(rng.integers(2, 5))
        arch = Architecture(m, tuple(hidden + [Layer(k, "softmax")]))
        y, loss = rng.integers(0, k, size=n), "categorical_xent"
    elif kind == 1:
        arch = Architecture(m, tuple(hidden + [Layer(1, "sigmoid")]))
        y, loss = rng.integers(0, 2, size=n), "logistic"
    elif kind == 2:
        arch = Architecture(m, tuple(hidden + [Layer(1, "linear")]), task="regression")
        y, loss = rng.normal(0.0, 1.0, size=n), "squared"
    else:
        arch = Architecture(m, tuple(hidden + [Layer(1, "sigmoid")]))
        y, loss = rng.integers(0, 2, size=n).astype(float), "squared"
    return init_model(arch, rng.child("init")), X, y, loss


@pytest.mark.criterion(6, "analytic gradients match central differences (50 nets)")
def test_gradient_correctness():
    master = RngStream(6)
    worst = 0.0
    h = 1e-6
    for i in range(50):
        model, X, y, loss = _random_net(master.child(f"net/{i}"), i)
        G = per_example_grads(model, X, y, loss).sum(axis=0)
        num = np.zeros_like(model.theta)
        for p in range(model.theta.size):
            plus, minus = model.copy(), model.copy()
            plus.theta[p] += h
            minus.theta[p] -= h
            num[p] = (per_example_losses(plus, X, y, loss).sum() - per_example_losses(minus, X, y, loss).sum()) / (2 * h)
        rel = np.max(np.abs(G - num) / np.maximum(1e-3, np.abs(G) + np.abs(num)))
        worst = max(worst, float(rel))
    report(f"max relative error {worst:.2e}")
    assert worst < 1e-5


# --- 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "DP-SGD with z=0 and huge C reproduces SGD over 100 steps")
def test_dpsgd_degenerates_to_sgd():
    rng = RngStream(7)
    X = rng.normal(0.0, 1.0, size=(32, 5))
    y = rng.integers(0, 3, size=32)
    model = init_model(mlp(5, [8], 3, "tanh"), rng.child("init"))
    # one full batch per epoch gives one snapshot per step
    base = TrainConfig(0.1, 32, 100)
    a, b = [], []
    sgd_train(model, X, y, base, rng.child("t"), on_epoch=lambda e, m: a.append(m.theta.copy()))
    cfg = TrainConfig(0.1, 32, 100, clip_l2=1e9, noise_multiplier=0.0)
    dpsgd_train(model, X, y, cfg, rng.child("t"), on_epoch=lambda e, m: b.append(m.theta.copy()))
    assert len(a) == len(b) == 100
    diff = max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
    report(f"max |theta_sgd - theta_dp| = {diff:.1e}")
    assert diff < 1e-10


# --- 8 ---------------------------------------------------------------------------

def _cfs_fixture():
    rng = RngStream(8)
    n = 400
    y = rng.integers(0, 2, size=n)
    X = np.empty((n, 6))
    X[:, 0] = rng.integers(0, 3, size=n)
    X[:, 1] = np.where(rng.random(n) < 0.7, y, 1 - y)  # noisy copy of the label
    X[:, 2] = rng.integers(0, 4, size=n)
    X[:, 3] = y  # duplicates the label
    X[:, 4] = np.where(rng.random(n) < 0.6, y, rng.integers(0, 2, size=n)) + 2 * rng.integers(0, 2, size=n)
    X[:, 5] = rng.normal(0.0, 1.0, size=n)
    return X, y


def _h(*cols):
    """Plug-in entropy in bits of the joint distribution of discrete columns."""
    _, counts = np.unique(np.column_stack(cols), axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def _oracle_merit(S, cols, y):
    def su(a, b):
        ha, hb = _h(a), _h(b)
        return 0.0 if ha + hb == 0 else 2 * (ha + hb - _h(a, b)) / (ha + hb)
    k = len(S)
    ry = sum(su(cols[j], y) for j in S) / k
    pairs = list(itertools.combinations(S, 2))
    rxx = sum(su(cols[i], cols[j]) for i, j in pairs) / len(pairs) if pairs else 0.0
    return k * ry / math.sqrt(k + k * (k - 1) * rxx)


@pytest.mark.criterion(8, "CFS greedy, merit vs enumeration oracle, GA within 95% of optimum")
def test_cfs_correctness():
    from privaware.feature_selection import discretize

    X, y = _cfs_fixture()
    table = SucTable.from_data(X, y)
    assert cfs_greedy(range(6), 1, table) == (3,)
    cols = [discretize(X[:, j]) for j in range(6)]
    best = -math.inf
    for r in range(1, 7):
        for S in itertools.combinations(range(6), r):
            ours, ref = merit(S, table), _oracle_merit(S, cols, y)
            assert abs(ours - ref) <= 1e-12, (S, ours, ref)
            best = max(best, ref)
    hits = 0
    for s in range(20):
        S = cfs_ga(range(6), 10, 10, 0.5, 0.5, 0.3, table, RngStream(s))
        hits += merit(S, table) >= 0.95 * best
    report(f"GA within 95% of optimum in {hits}/20 runs")
    assert hits >= 18


# --- 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "PAAS finds planted optimum, memo counts, RS best-of-k monotone")
def test_search_correctness():
    space, opt, fitness = planted_space()
    assert space.size == 45
    found = 0
    for s in range(20):
        seen = []

        def stub(ind):
            seen.append(ind.key)
            return fitness(ind)

        res = paas(space, 6, 10, FitnessOracle(stub, 1, eps_prime=math.inf), RngStream(s))
        assert len(seen) == len(set(seen))
        assert res.unique_trainings == len(set(seen))
        found += res.best.genes == opt
    report(f"PAAS found the optimum in {found}/20 runs")
    assert found >= 18
    means = []
    for k in (1, 5, 25):
        vals = [rs_search(space, k, FitnessOracle(fitness, 1, eps_prime=math.inf), RngStream(s)).best.fitness
                for s in range(50)]
        means.append(float(np.mean(vals)))
    report(f"RS mean best fitness for k=1,5,25: {means}")
    assert means[0] <= means[1] <= means[2]


# --- 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10, "crossover epsilon on constructed and Adult curves")
def test_crossover_estimator():
    simple, complex_ = synthetic_crossover_curves()
    res = crossover_epsilon(simple, complex_)
    step = 0.1
    assert res.status == "finite"
    assert abs(res.value - 5.0) <= step + 1e-12
    assert abs(res.interpolated - 5.0) <= step
    # a sparser grid with the same analytic crossing
    grid = np.arange(1, 11, dtype=float)
    res2 = crossover_epsilon(AccuracyCurve(grid, np.full(10, 0.8)),
                             AccuracyCurve(grid, np.interp(grid, [0.1, 5, 10], [0.5, 0.8, 0.95])))
    assert abs(res2.interpolated - 5.0) <= 1.0
    adult = crossover_epsilon(*adult_crossover_curves())
    report(f"synthetic value {res.value}, interpolated {res.interpolated}; Adult {adult.value}")
    assert adult.status == "finite" and 10 <= adult.value <= 20


# --- 11 --------------------------------------------------------------------------

@pytest.mark.criterion(11, "epsilon-vs-n fit recovers (1.1, 8922.4)")
def test_eps_fit_roundtrip():
    alpha, beta = 1.1, 8922.4
    ns = np.array([1000, 2000, 5000, 10000, 20000, 40000, 60000], dtype=float)
    eps = np.log(alpha + beta / ns)
    fit = fit_eps_vs_n(list(zip(ns, eps)))
    assert fit.alpha == pytest.approx(alpha, rel=1e-9)
    assert fit.beta == pytest.approx(beta, rel=1e-9)
    rng = RngStream(11)
    noisy = eps + rng.normal(0.0, 0.01, size=eps.size)
    fit = fit_eps_vs_n(list(zip(ns, noisy)))
    report(f"noisy fit alpha={fit.alpha:.4f} beta={fit.beta:.1f}")
    assert fit.alpha == pytest.approx(alpha, rel=0.05)
    assert fit.beta == pytest.approx(beta, rel=0.05)


# --- 12 --------------------------------------------------------------------------

@pytest.mark.criterion(12, "parameter counts 1,362,122 / 33,482 / 9,610")
def test_param_counts():
    fcn = mlp(784, [1024, 512, 64], 10)
    assert param_count(fcn) == (1_362_122, 1_362_122)
    assert param_count(rwt_freeze(fcn, 2)) == (1_362_122, 33_482)
    # the small searched FCN, on 64 principal components
    assert param_count(mlp(64, [128], 10)) == (9_610, 9_610)


# --- 13 --------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(13, "simple beats complex at eps=0.5, complex ties or wins without noise")
def test_simple_beats_complex_under_dp():
    # each architecture picks its learning rate and clip norm on a validation split
    spec = TrainSpec(batch=100, epochs=20, delta=1e-5)
    dp_acc = {"simple": [], "complex": []}
    free_acc = {"simple": [], "complex": []}
    for s in range(10):
        rng = RngStream(s)
        ds = split(synthetic_sum_dataset(5000, 10, 10, rng.child("data")), (0.64, 0.16, 0.2), rng.child("split"))
        tr, va, te = ds.part("train"), ds.part("val"), ds.part("test")
        for name, arch in simple_and_complex(tr.m).items():
            res = tuned_accuracy_at_epsilon(arch, tr, va, te, 0.5, spec, rng.child(name))
            assert res.epsilon == pytest.approx(0.5, rel=0.02)
            dp_acc[name].append(res.test_accuracy)
            free_acc[name].append(tuned_accuracy_at_epsilon(arch, tr, va, te, math.inf, spec, rng.child(name)).test_accuracy)
    dp = {k: round(float(np.mean(v)), 4) for k, v in dp_acc.items()}
    free = {k: round(float(np.mean(v)), 4) for k, v in free_acc.items()}
    report(f"eps=0.5: {dp}; noise-free: {free}")
    assert dp["simple"] >= dp["complex"]
    assert free["complex"] >= free["simple"] - 0.01  # reversal or tie
