"""Privacy-aware architecture search: genetic (PAAS), randomized (RS) and multi-generation randomized (MGRS).

A search space maps each named choice to an ordered list of values. FCN
spaces use the choice names ``num_layers``, ``units_<i>``, ``activation_<i>``
and ``trainable_<i>`` (1-based), which ``Individual.realize`` turns into an
:class:`Architecture`. Other choice names are allowed for abstract spaces
driven by a stub trainer.
"""

from __future__ import annotations

import configparser
import math
import re
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .accountant import (
    DEFAULT_DELTA_PRIME,
    CompositionLedger,
    mgrs_generation_budgets,
    mgrs_total_budget,
    rs_epsilon_prime,
    rs_total_budget,
)
from .mechanisms import PrivacyBudget
from .models import Architecture, Layer
from .numerics import RngStream

_LAYER_GENE = re.compile(r"^(units|activation|trainable|dropout)_(\d+)$")
_CNN_HINTS = ("filters", "kernel", "blocks", "conv", "pool")
_DISTINCT_ATTEMPTS = 20


class ConfigError(ValueError):
    """Invalid or unsupported search-space configuration."""


def _parse_value(tok: str):
    t = tok.strip()
    low = t.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return low if low in ("relu", "sigmoid", "tanh", "linear") else t


@dataclass
class SearchSpace:
    choices: dict[str, list]
    input_dim: int | None = None
    n_out: int = 10
    task: str = "classification"
    dropout: float = 0.0

    def __post_init__(self):
        self.choices = {str(k): list(v) for k, v in self.choices.items()}
        for name, values in self.choices.items():
            if not values:
                raise ConfigError(f"choice {name!r} has no values")
            if any(h in name.lower() for h in _CNN_HINTS):
                raise ConfigError(f"choice {name!r} looks like a convolutional layer; only FCN spaces are supported")

    @property
    def names(self) -> list[str]:
        return list(self.choices)

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.choices.values())

    @property
    def is_fcn(self) -> bool:
        return "num_layers" in self.choices

    def active(self, name: str, genes: dict) -> bool:
        if not self.is_fcn:
            return True
        m = _LAYER_GENE.match(name)
        return m is None or int(m.group(2)) <= genes["num_layers"]

    @classmethod
    def from_ini(cls, path) -> SearchSpace:
        """Read ``[space]`` (choice = v1, v2, ...) and an optional ``[network]`` section."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            if not cp.read(path):
                raise ConfigError(f"cannot read search space file {path}")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        if "space" not in cp:
            raise ConfigError(f"{path}: missing [space] section")
        net = cp["network"] if "network" in cp else {}
        kind = net.get("kind", "fcn").lower()
        if kind != "fcn":
            raise ConfigError(f"{path}: layer kind {kind!r} is not supported (only fcn)")
        known = {"kind", "input_dim", "n_out", "task", "dropout"}
        unknown = set(net) - known
        if unknown:
            raise ConfigError(f"{path}: unknown [network] keys {sorted(unknown)}")
        choices = {k: [_parse_value(t) for t in v.split(",") if t.strip()] for k, v in cp["space"].items()}
        return cls(
            choices,
            input_dim=int(net["input_dim"]) if "input_dim" in net else None,
            n_out=int(net.get("n_out", 10)),
            task=net.get("task", "classification"),
            dropout=float(net.get("dropout", 0.0)),
        )


def fcn_space(input_dim: int, n_out: int = 10, dropout: float = 0.2, trainable_genes: bool = False) -> SearchSpace:
    """The FCN space of layer counts, widths and activations used in the experiments."""
    choices = {
        "num_layers": [1, 2, 3],
        "units_1": [64, 128, 512, 1024, 2048],
        "units_2": [64, 128, 256],
        "units_3": [10, 16, 32, 64],
        "activation_1": ["relu", "sigmoid", "tanh"],
        "activation_2": ["relu", "sigmoid", "tanh"],
        "activation_3": ["relu", "sigmoid", "tanh"],
    }
    if trainable_genes:
        choices.update({f"trainable_{i}": [True, False] for i in (1, 2, 3)})
    return SearchSpace(choices, input_dim=input_dim, n_out=n_out, dropout=dropout)


@dataclass
class Individual:
    space: SearchSpace = field(repr=False)
    genes: dict
    fitness: float | None = None

    @property
    def key(self) -> tuple:
        """Canonical key over the genes that affect the realized network."""
        return tuple((n, self.genes[n]) for n in self.space.names if self.space.active(n, self.genes))

    def realize(self) -> Architecture:
        sp = self.space
        if not sp.is_fcn:
            raise ConfigError("this search space does not describe an FCN")
        if sp.input_dim is None:
            raise ConfigError("search space needs input_dim to realize architectures")
        layers = []
        for i in range(1, self.genes["num_layers"] + 1):
            layers.append(Layer(
                int(self.genes.get(f"units_{i}", 64)),
                self.genes.get(f"activation_{i}", "relu"),
                float(self.genes.get(f"dropout_{i}", sp.dropout)),
                bool(self.genes.get(f"trainable_{i}", True)),
            ))
        if sp.task == "regression":
            layers.append(Layer(1, "linear"))
        else:
            layers.append(Layer(sp.n_out, "softmax"))
        return Architecture(sp.input_dim, tuple(layers), sp.task)


def sample_architecture(space: SearchSpace, rng: RngStream) -> Individual:
    genes = {n: v[int(rng.integers(0, len(v)))] for n, v in space.choices.items()}
    return Individual(space, genes)


def _distinct_sample(space: SearchSpace, k: int, rng: RngStream) -> list[Individual]:
    """k uniform samples, rejecting repeats while the space still has unseen members."""
    out, seen = [], set()
    attempts, cap = 0, _DISTINCT_ATTEMPTS * k
    while len(out) < k:
        attempts += 1
        ind = sample_architecture(space, rng)
        if ind.key in seen and attempts <= cap:
            continue
        seen.add(ind.key)
        out.append(ind)
    return out


def crossover(a: Individual, b: Individual, rng: RngStream) -> Individual:
    """Each gene from ``a`` or ``b`` with probability 1/2."""
    if a.space.names != b.space.names:
        raise ValueError("crossover between different search spaces")
    pick = rng.random(len(a.space.names)) < 0.5
    genes = {n: (a.genes[n] if p else b.genes[n]) for n, p in zip(a.space.names, pick)}
    return Individual(a.space, genes)


def mutate(space: SearchSpace, a: Individual, rng: RngStream) -> Individual:
    """Resample one uniformly chosen gene (possibly to its current value)."""
    name = space.names[int(rng.integers(0, len(space.names)))]
    values = space.choices[name]
    genes = dict(a.genes)
    genes[name] = values[int(rng.integers(0, len(values)))]
    return Individual(space, genes)


def evolve(space: SearchSpace, ranked: Sequence[Individual], alpha: float, beta: float, p_mu: float,
           rng: RngStream, elite: int = 0) -> list[Individual]:
    """Next generation from a population ranked by descending fitness.

    Parents are the top ``alpha`` share plus a random ``beta`` share of the
    rest. Children come from crossover of uniformly drawn parent pairs until
    the population is refilled with distinct members; each child is then
    mutated with probability ``p_mu``. With a single parent, children are
    mutated clones. The first ``elite`` ranked individuals are carried over
    unchanged (0 reproduces the plain algorithm).
    """
    if not (0 <= alpha <= 1 and 0 <= beta <= 1 and alpha + beta <= 1 + 1e-12):
        raise ValueError("need alpha, beta in [0, 1] with alpha + beta <= 1")
    if not 0 <= p_mu <= 1:
        raise ValueError("p_mu must be in [0, 1]")
    n = len(ranked)
    if n == 0:
        raise ValueError("empty population")
    n_a = max(1, int(round(alpha * n)))
    rest = list(ranked[n_a:])
    n_b = min(len(rest), int(round(beta * n)))
    parents = list(ranked[:n_a])
    if n_b:
        parents += [rest[i] for i in sorted(rng.choice(len(rest), size=n_b, replace=False))]
    # the next generation is a set: repeated children are rejected until the
    # attempt cap, after which duplicates fill the remaining slots
    kept = [Individual(space, dict(a.genes)) for a in ranked[:min(elite, n)]]
    out, seen = [], {a.key for a in kept}
    n -= len(kept)
    attempts, cap = 0, _DISTINCT_ATTEMPTS * n
    while len(out) < n:
        attempts += 1
        if len(parents) >= 2:
            i, j = rng.integers(0, len(parents), size=2)
            child = crossover(parents[i], parents[j], rng)
        else:
            child = Individual(space, dict(parents[0].genes))
        if child.key in seen and attempts <= cap:
            continue
        seen.add(child.key)
        out.append(child)
    for idx, child in enumerate(out):
        if len(parents) < 2 or rng.random() < p_mu:
            out[idx] = mutate(space, child, rng)
    return kept + out


# --- fitness ---------------------------------------------------------------------------

@dataclass
class FitnessOracle:
    """Trains an individual and scores it on a validation set disjoint from training.

    ``train`` maps an :class:`Individual` to a trained model (or anything
    ``score`` understands). Without ``score``, ``train`` must return the
    validation accuracy itself.
    """

    train: Callable[[Individual], object]
    n_val: int
    eps_prime: float = 0.02
    eps_train: float = 1.0
    delta: float = 1e-5
    score: Callable[[object], float] | None = None

    def __post_init__(self):
        if self.n_val < 1:
            raise ValueError("validation set must be nonempty")
        if not self.eps_prime > 0:
            raise ValueError("eps_prime must be > 0")

    def accuracy(self, ind: Individual) -> float:
        out = self.train(ind)
        return float(self.score(out) if self.score is not None else out)


def noised_fitness(oracle: FitnessOracle, accuracy: float, rng: RngStream) -> float:
    """Validation accuracy plus Lap(1 / (n_val * eps_prime)); not clamped."""
    if math.isinf(oracle.eps_prime):
        return float(accuracy)
    return float(accuracy) + float(rng.laplace(0.0, 1.0 / (oracle.n_val * oracle.eps_prime)))


class SearchError(RuntimeError):
    def __init__(self, ind: Individual, cause: BaseException):
        super().__init__(f"training failed for {dict(ind.key)}: {cause}")
        self.genes = dict(ind.genes)


class _Memo:
    """Trains each canonical key once; noise is drawn once per key from a key-derived stream."""

    def __init__(self, oracle: FitnessOracle, rng: RngStream, ledger: CompositionLedger):
        self.oracle, self.rng, self.ledger = oracle, rng, ledger
        self.cache: dict = {}
        self.calls = 0
        self._lock = threading.Lock()
        self._inflight: dict = {}

    def __call__(self, ind: Individual) -> float:
        key = ind.key
        with self._lock:
            if key in self.cache:
                return self.cache[key]
            ev = self._inflight.get(key)
            owner = ev is None
            if owner:
                ev = self._inflight[key] = threading.Event()
        if not owner:
            ev.wait()
            with self._lock:
                if key not in self.cache:
                    raise SearchError(ind, RuntimeError("concurrent training failed"))
                return self.cache[key]
        try:
            acc = self.oracle.accuracy(ind)
        except Exception as e:
            with self._lock:
                self._inflight.pop(key).set()
            raise SearchError(ind, e) from e
        fit = noised_fitness(self.oracle, acc, self.rng.child("fitness/" + repr(key)))
        with self._lock:
            self.calls += 1
            self.cache[key] = fit
            self.ledger.record(repr(key), self.oracle.eps_train, self.oracle.delta, training=True)
            self._inflight.pop(key).set()
        return fit


def _score_population(pop: list[Individual], memo: _Memo, workers: int) -> None:
    if workers > 1 and len(pop) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            fits = list(ex.map(memo, pop))
    else:
        fits = [memo(ind) for ind in pop]
    for ind, f in zip(pop, fits):
        ind.fitness = f


def _ranked(pop: list[Individual]) -> list[Individual]:
    # descending fitness, earlier canonical key wins ties
    return sorted(pop, key=lambda ind: (-ind.fitness, repr(ind.key)))


@dataclass
class SearchResult:
    best: Individual
    ledger: CompositionLedger
    unique_trainings: int
    trace: list[float]  # best noised fitness per generation
    total_epsilon: float | None = None
    budget_detail: dict = field(default_factory=dict)

    @property
    def architecture(self) -> Architecture:
        return self.best.realize()


def paas(space: SearchSpace, gens_l: int, pop_k: int, oracle: FitnessOracle, rng: RngStream,
         alpha: float = 0.4, beta: float = 0.1, p_mu: float = 0.5, workers: int = 1,
         delta_prime: float = DEFAULT_DELTA_PRIME, elite: int = 1) -> SearchResult:
    """Genetic search ranked by Laplace-noised validation accuracy.

    ``elite`` top individuals survive each generation unmodified; set it to 0
    for the plain algorithm.

    The reported budget is advanced composition over the unique trainings;
    the fitness noise touches only the disjoint validation set and composes
    in parallel.
    """
    if gens_l < 1 or pop_k < 1:
        raise ValueError("gens_l and pop_k must be >= 1")
    ledger = CompositionLedger()
    memo = _Memo(oracle, rng.child("memo"), ledger)
    init_rng, evo_rng = rng.child("init"), rng.child("evolve")
    pop = _distinct_sample(space, pop_k, init_rng)
    trace = []
    for gen in range(1, gens_l + 1):
        _score_population(pop, memo, workers)
        ranked = _ranked(pop)
        trace.append(ranked[0].fitness)
        if gen < gens_l:
            pop = evolve(space, ranked, alpha, beta, p_mu, evo_rng, elite)
    best = ranked[0]
    total = ledger.total_epsilon(delta_prime)
    return SearchResult(best, ledger, memo.calls, trace, total,
                        {"c": ledger.c, "eps_train": oracle.eps_train, "delta_prime": delta_prime,
                         "eps_fitness": oracle.eps_prime})


def rs_search(space: SearchSpace, k: int, oracle: FitnessOracle, rng: RngStream, x: float | None = None,
              delta_fail: float = 1e-4, v: int | None = None, workers: int = 1) -> SearchResult:
    """Best of ``k`` independent uniform samples.

    With ``x`` (acceptable loss proportion) given, the budget is
    eps_train + 8 eps' with eps' from the selection bound for (x, v, k).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ledger = CompositionLedger()
    memo = _Memo(oracle, rng.child("memo"), ledger)
    sampler = rng.child("sample")
    pop = [sample_architecture(space, sampler) for _ in range(k)]
    _score_population(pop, memo, workers)
    best = _ranked(pop)[0]
    res = SearchResult(best, ledger, memo.calls, [best.fitness])
    if x is not None:
        ep = rs_epsilon_prime(x, v or oracle.n_val, k, delta_fail)
        res.total_epsilon = rs_total_budget(oracle.eps_train, ep)
        res.budget_detail = {"eps_prime": ep, "x": x, "v": v or oracle.n_val, "delta_fail": delta_fail}
    return res


def rs_budget(result: SearchResult) -> PrivacyBudget | None:
    return None if result.total_epsilon is None else PrivacyBudget(result.total_epsilon)


def mgrs(space: SearchSpace, gen_sizes: Sequence[int], p_mutate: float, oracle: FitnessOracle,
         rng: RngStream, x: float | None = None, delta_fail: float = 1e-4, v: int | None = None,
         workers: int = 1) -> SearchResult:
    """Randomized search within generations; each next generation is built from the
    current winner by mutation (prob. ``p_mutate``) or fresh uniform sampling.

    Returns the winner of the final generation. The budget composes the
    per-generation selection budgets sequentially, with the final training
    charged once.
    """
    gen_sizes = [int(g) for g in gen_sizes]
    if not gen_sizes or any(g < 1 for g in gen_sizes):
        raise ValueError("gen_sizes must be a nonempty list of positive counts")
    if not 0 <= p_mutate <= 1:
        raise ValueError("p_mutate must be in [0, 1]")
    ledger = CompositionLedger()
    memo = _Memo(oracle, rng.child("memo"), ledger)
    sampler = rng.child("sample")
    pop = [sample_architecture(space, sampler) for _ in range(gen_sizes[0])]
    trace = []
    best = None
    for gi, size in enumerate(gen_sizes):
        if gi > 0:
            pop = [mutate(space, best, sampler) if sampler.random() < p_mutate
                   else sample_architecture(space, sampler) for _ in range(size)]
        _score_population(pop, memo, workers)
        best = _ranked(pop)[0]
        trace.append(best.fitness)
    res = SearchResult(best, ledger, memo.calls, trace)
    if x is not None:
        per_gen = mgrs_generation_budgets(oracle.eps_train, gen_sizes, x, v or oracle.n_val, delta_fail)
        res.total_epsilon = mgrs_total_budget(per_gen)
        res.budget_detail = {"per_generation": per_gen, "x": x, "v": v or oracle.n_val,
                             "delta_fail": delta_fail}
    return res
