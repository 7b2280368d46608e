"""Correlation-based feature selection (CFS) and its privacy-aware variants.

Feature sets are sorted tuples of column indices. Subsets inside the genetic
searches are boolean masks over the candidate list.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .accountant import DEFAULT_DELTA_PRIME, pafs_total_budget
from .numerics import RngStream, entropy

FeatureSet = tuple[int, ...]
N_BINS = 10


def feature_set(indices: Iterable[int]) -> FeatureSet:
    out = tuple(sorted({int(i) for i in indices}))
    if out and out[0] < 0:
        raise ValueError("feature indices must be nonnegative")
    return out


def discretize(col, bins: int = N_BINS) -> np.ndarray:
    """Integer codes for a column: kept as-is if it has <= ``bins`` distinct values,
    otherwise equal-frequency bins."""
    col = np.asarray(col)
    uniq, codes = np.unique(col, return_inverse=True)
    if uniq.size <= bins:
        return codes.astype(np.int64)
    edges = np.unique(np.quantile(col.astype(np.float64), np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, col, side="right").astype(np.int64)


def _joint_codes(x, y) -> np.ndarray:
    _, xc = np.unique(x, return_inverse=True)
    _, yc = np.unique(y, return_inverse=True)
    return xc * (yc.max() + 1) + yc


def _entropies(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x).ravel(), np.asarray(y).ravel()
    if x.shape != y.shape:
        raise ValueError("columns must have equal length")
    if x.size == 0:
        raise ValueError("empty columns")
    hx = entropy(np.unique(x, return_counts=True)[1])
    hy = entropy(np.unique(y, return_counts=True)[1])
    hxy = entropy(np.unique(_joint_codes(x, y), return_counts=True)[1])
    return hx, hy, hxy


def _suc_from(hx: float, hy: float, hxy: float) -> float:
    denom = hx + hy
    if denom <= 0:
        return 0.0
    return 2.0 * (1.0 - hxy / denom)


def suc(x, y) -> float:
    """Symmetrical uncertainty 2 (1 - H(x,y) / (H(x) + H(y))) of two discrete columns."""
    v = _suc_from(*_entropies(x, y))
    return min(1.0, max(0.0, v))


def entropy_sensitivity(n: int) -> float:
    """Add/remove-one bound on the change of a plug-in entropy estimate, in bits."""
    if n < 2:
        return 1.0
    return 2.0 / n * math.log2(n)


def suc_dp(x, y, eps_h: float, rng: RngStream) -> float:
    """SUC computed from Laplace-noised entropies, clamped to [0, 1]."""
    if not eps_h > 0:
        raise ValueError(f"eps_h must be > 0, got {eps_h}")
    hx, hy, hxy = _entropies(x, y)
    if math.isinf(eps_h):
        return suc(x, y)
    scale = entropy_sensitivity(len(np.asarray(x).ravel())) / eps_h
    noise = rng.laplace(0.0, scale, size=3)
    v = _suc_from(hx + noise[0], hy + noise[1], hxy + noise[2])
    return min(1.0, max(0.0, v))


@dataclass
class SucTable:
    corr_y: np.ndarray
    corr: np.ndarray
    dp_noised: bool = False
    eps_h: float | None = None

    @classmethod
    def from_data(cls, X, y, eps_h: float | None = None, rng: RngStream | None = None,
                  bins: int = N_BINS) -> SucTable:
        X = np.asarray(X)
        m = X.shape[1]
        cols = [discretize(X[:, j], bins) for j in range(m)]
        yd = discretize(y, max(bins, len(np.unique(y))))
        if eps_h is None:
            f = lambda a, b, label: suc(a, b)
        else:
            if rng is None:
                raise ValueError("a noised table needs an rng")
            f = lambda a, b, label: suc_dp(a, b, eps_h, rng.child(label))
        corr_y = np.array([f(cols[j], yd, f"y/{j}") for j in range(m)])
        corr = np.eye(m)
        for i in range(m):
            for j in range(i + 1, m):
                corr[i, j] = corr[j, i] = f(cols[i], cols[j], f"{i}/{j}")
        return cls(corr_y, corr, eps_h is not None, eps_h)


def merit(S: Sequence[int], table: SucTable) -> float:
    """k corr_y / sqrt(k + k (k - 1) corr), with means over S and its distinct pairs."""
    S = list(S)
    k = len(S)
    if k == 0:
        raise ValueError("merit of an empty feature set is undefined")
    cy = float(np.mean(table.corr_y[S]))
    if k == 1:
        return cy
    sub = table.corr[np.ix_(S, S)]
    cxx = float((sub.sum() - np.trace(sub)) / (k * (k - 1)))
    return k * cy / math.sqrt(k + k * (k - 1) * cxx)


def cfs_greedy(candidates: Sequence[int], k: int, table: SucTable) -> FeatureSet:
    """Add the feature that maximizes merit until k are chosen (lower index wins ties)."""
    pool = list(feature_set(candidates))
    if not 0 <= k <= len(pool):
        raise ValueError(f"k must be in [0, {len(pool)}], got {k}")
    chosen: list[int] = []
    for _ in range(k):
        best, best_f = -math.inf, None
        for f in pool:
            if f in chosen:
                continue
            v = merit(chosen + [f], table)
            if v > best:
                best, best_f = v, f
        chosen.append(best_f)
    return feature_set(chosen)


def random_subset(candidates: Sequence[int], size: int, rng: RngStream) -> FeatureSet:
    pool = feature_set(candidates)
    if not 0 <= size <= len(pool):
        raise ValueError(f"size must be in [0, {len(pool)}], got {size}")
    return feature_set(rng.choice(np.array(pool, dtype=np.int64), size=size, replace=False).tolist())


# --- genetic search over subsets -------------------------------------------------------

@dataclass
class GaResult:
    best: FeatureSet
    score: float
    best_per_generation: list[float] = field(default_factory=list)
    evaluations: int = 0


def _check_ga(pop_k, gens_l, alpha, p_co, p_mu):
    if pop_k < 1 or gens_l < 1:
        raise ValueError("pop_k and gens_l must be >= 1")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if p_co < 0 or p_mu < 0 or p_co + p_mu > 1 + 1e-12:
        raise ValueError("need p_co, p_mu >= 0 and p_co + p_mu <= 1")


def _random_mask(m: int, rng: RngStream) -> np.ndarray:
    while True:
        mask = rng.random(m) < 0.5
        if mask.any():
            return mask


def _genetic(pool: list[int], pop_k: int, gens_l: int, alpha: float, p_co: float, p_mu: float,
             score_many: Callable[[list[FeatureSet]], list[float]], rng: RngStream,
             elitism: bool = True) -> GaResult:
    m = len(pool)
    to_set = lambda mask: tuple(pool[i] for i in np.flatnonzero(mask))
    pop = [_random_mask(m, rng) for _ in range(pop_k)]
    trace = []
    best = None
    for gen in range(gens_l + 1):
        sets = [to_set(p) for p in pop]
        scores = score_many(sets)
        # rank descending by score; lexicographically smaller feature set wins ties
        order = sorted(range(len(pop)), key=lambda i: (-scores[i], sets[i]))
        best = (sets[order[0]], scores[order[0]], pop[order[0]])
        trace.append(scores[order[0]])
        if gen == gens_l:
            break
        n_par = min(len(pop), max(1, int(round(alpha * len(pop)))))
        parents = [pop[i] for i in order[:n_par]]
        new = [best[2].copy()] if elitism else []
        while len(new) < pop_k:
            if n_par >= 2:
                i, j = rng.choice(n_par, size=2, replace=False)
            else:
                i = j = 0
            s1, s2 = parents[i], parents[j]
            u = rng.random()
            if u < p_co and n_par >= 2 and m >= 2:
                cut = int(rng.integers(1, m))
                q = np.concatenate([s1[:cut], s2[cut:]])
            elif u < p_co + p_mu:
                q = s1.copy()
                q[int(rng.integers(0, m))] ^= True
            else:
                q = s1.copy()
            if not q.any():  # keep every individual nonempty
                q = s1.copy()
            new.append(q)
        pop = new
    return GaResult(best[0], best[1], trace[1:] if gens_l else trace)


def cfs_ga(candidates: Sequence[int], pop_k: int, gens_l: int, alpha: float, p_co: float,
           p_mu: float, table: SucTable, rng: RngStream, elitism: bool = True) -> FeatureSet:
    """Genetic CFS: bitmask genes, single-cut crossover, one-bit-flip mutation."""
    return cfs_ga_run(candidates, pop_k, gens_l, alpha, p_co, p_mu, table, rng, elitism).best


def cfs_ga_run(candidates, pop_k, gens_l, alpha, p_co, p_mu, table, rng, elitism=True) -> GaResult:
    _check_ga(pop_k, gens_l, alpha, p_co, p_mu)
    pool = list(feature_set(candidates))
    if not pool:
        raise ValueError("no candidate features")
    return _genetic(pool, pop_k, gens_l, alpha, p_co, p_mu,
                    lambda sets: [merit(s, table) for s in sets], rng, elitism)


class FitnessError(RuntimeError):
    def __init__(self, features: FeatureSet, cause: BaseException):
        super().__init__(f"fitness failed for feature set {features}: {cause}")
        self.features = features


class MemoFitness:
    """Thread-safe memo around a fitness closure; one call per distinct key."""

    def __init__(self, fn: Callable[[FeatureSet], float]):
        self.fn = fn
        self.cache: dict = {}
        self.calls = 0
        self._lock = threading.Lock()
        self._pending: dict = {}

    def __call__(self, key):
        with self._lock:
            if key in self.cache:
                return self.cache[key]
            ev = self._pending.get(key)
            owner = ev is None
            if owner:
                ev = self._pending[key] = threading.Event()
                self.calls += 1
        if not owner:
            ev.wait()
            with self._lock:
                if key not in self.cache:
                    raise FitnessError(key, RuntimeError("concurrent evaluation failed"))
                return self.cache[key]
        try:
            value = float(self.fn(key))
        except Exception as e:
            with self._lock:
                self._pending.pop(key).set()
            if isinstance(e, FitnessError):
                raise
            raise FitnessError(key, e) from e
        with self._lock:
            self.cache[key] = value
            self._pending.pop(key).set()
        return value


@dataclass
class PafsResult:
    best: FeatureSet
    accuracy: float
    total_epsilon: float
    unique_trainings: int
    best_per_generation: list[float]


def pafs(candidates: Sequence[int], pop_k: int, gens_l: int, fitness: Callable[[FeatureSet], float],
         rng: RngStream, eps_per_training: float = 0.1, delta_prime: float = DEFAULT_DELTA_PRIME,
         alpha: float = 0.5, p_co: float = 0.5, p_mu: float = 0.3, workers: int = 1) -> PafsResult:
    """Genetic feature selection scored by the accuracy of a DP-trained model.

    ``fitness`` trains with DP on the projected data and returns validation
    accuracy. Every distinct subset is trained once; the budget composes over
    those unique trainings.
    """
    _check_ga(pop_k, gens_l, alpha, p_co, p_mu)
    pool = list(feature_set(candidates))
    if not pool:
        raise ValueError("no candidate features")
    memo = MemoFitness(fitness)

    def score_many(sets):
        if workers <= 1:
            return [memo(s) for s in sets]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(memo, sets))

    res = _genetic(pool, pop_k, gens_l, alpha, p_co, p_mu, score_many, rng)
    total = pafs_total_budget(eps_per_training, memo.calls, delta_prime)
    return PafsResult(res.best, res.score, total, memo.calls, res.best_per_generation)
