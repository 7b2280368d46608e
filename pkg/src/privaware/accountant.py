"""Privacy budget arithmetic for single trainings and whole search workflows.

DP-SGD is accounted with Renyi DP of the Poisson-subsampled Gaussian
mechanism. Search workflows use advanced composition (genetic searches) or
the randomized-search selection bound (RS/MGRS).
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .numerics import log_add

DEFAULT_ORDERS: tuple[float, ...] = (
    tuple(1.0 + 0.25 * i for i in range(1, 36))  # 1.25 .. 9.75
    + tuple(float(a) for a in range(10, 65))
    + (128.0, 256.0)
)
DEFAULT_DELTA_PRIME = 1e-6


class InfeasibleBudgetError(ValueError):
    """No epsilon' in (0, 1/2) satisfies the randomized-search bound."""

    def __init__(self, message: str, required_v: float):
        super().__init__(message)
        self.required_v = required_v


@dataclass(frozen=True)
class DpSgdSetting:
    n: int
    batch: int
    epochs: float
    noise_multiplier: float
    clip_l2: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.n <= 0 or self.batch <= 0 or self.epochs <= 0:
            raise ValueError("n, batch and epochs must be positive")
        if self.batch > self.n:
            raise ValueError(f"batch ({self.batch}) exceeds dataset size ({self.n})")
        if not self.noise_multiplier > 0 or not self.clip_l2 > 0:
            raise ValueError("noise_multiplier and clip_l2 must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")

    @property
    def q(self) -> float:
        return self.batch / self.n

    @property
    def steps(self) -> int:
        return int(math.ceil(self.epochs * math.ceil(self.n / self.batch)))


@dataclass
class CompositionLedger:
    """Append-only record of mechanism invocations in a workflow."""

    entries: list[tuple[str, float, float, bool]] = field(default_factory=list)

    def record(self, label: str, epsilon: float, delta: float = 0.0, training: bool = True):
        self.entries.append((label, float(epsilon), float(delta), bool(training)))

    @property
    def c(self) -> int:
        return len({e[0] for e in self.entries if e[3]})

    def training_epsilon(self) -> float:
        eps = [e[1] for e in self.entries if e[3]]
        return max(eps) if eps else 0.0

    def total_epsilon(self, delta_prime: float = DEFAULT_DELTA_PRIME) -> float:
        """Advanced composition over the distinct trainings."""
        if self.c == 0:
            return 0.0
        return advanced_composition(self.training_epsilon(), self.c, delta_prime)

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"label": l, "epsilon": e, "delta": d, "training": t} for l, e, d, t in self.entries
            ],
            "c": self.c,
        }


def advanced_composition(epsilon: float, c: int, delta_prime: float = DEFAULT_DELTA_PRIME) -> float:
    """ε' = ε sqrt(2c ln(1/δ')) + c ε (e^ε − 1)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if c < 0:
        raise ValueError(f"c must be >= 0, got {c}")
    if not 0 < delta_prime < 1:
        raise ValueError(f"delta_prime must be in (0, 1), got {delta_prime}")
    return epsilon * math.sqrt(2.0 * c * math.log(1.0 / delta_prime)) + c * epsilon * math.expm1(epsilon)


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # log E[(mixture/base)^alpha] via the binomial expansion, exact for integer alpha
    log_a = -math.inf
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for i in range(alpha + 1):
        term = _log_comb(alpha, i) + i * log_q + (alpha - i) * log_1mq + (i * i - i) / (2 * sigma**2)
        log_a = log_add(log_a, term)
    return log_a


def _rdp_single(q: float, sigma: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if math.isinf(alpha):
        return math.inf
    # RDP is nondecreasing in the order, so rounding up is conservative
    a_int = int(math.ceil(alpha))
    return _log_a_int(q, sigma, a_int) / (a_int - 1)


def rdp_subsampled_gaussian(
    q: float, noise_multiplier: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS
) -> np.ndarray:
    """Renyi DP at each order after ``steps`` compositions."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling ratio must be in (0, 1], got {q}")
    if not noise_multiplier > 0:
        raise ValueError(f"noise_multiplier must be > 0, got {noise_multiplier}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    orders = np.atleast_1d(np.asarray(orders, dtype=np.float64))
    if np.any(orders <= 1):
        raise ValueError("orders must be > 1")
    return np.array([_rdp_single(q, noise_multiplier, a) for a in orders]) * steps


def rdp_to_dp(rdp, orders, delta: float, method: str = "classic") -> tuple[float, float]:
    """Convert an RDP curve to (ε, δ)-DP; returns (ε, best order).

    ``classic``: ε = min_α rdp(α) + ln(1/δ)/(α − 1).
    ``tight``: ε = min_α rdp(α) + ln((α−1)/α) − (ln δ + ln α)/(α − 1), the
    sharper conversion used by current DP-SGD accountants. Never larger than
    ``classic``.
    """
    rdp = np.atleast_1d(np.asarray(rdp, dtype=np.float64))
    orders = np.atleast_1d(np.asarray(orders, dtype=np.float64))
    if rdp.size == 0 or orders.size == 0:
        raise ValueError("empty rdp/orders")
    if rdp.shape != orders.shape:
        raise ValueError("rdp and orders must have the same length")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if method == "classic":
        eps = rdp + math.log(1.0 / delta) / (orders - 1)
    elif method == "tight":
        eps = rdp + np.log((orders - 1) / orders) - (math.log(delta) + np.log(orders)) / (orders - 1)
    else:
        raise ValueError(f"unknown conversion {method!r}")
    i = int(np.nanargmin(eps))
    return float(max(eps[i], 0.0)), float(orders[i])


def dpsgd_privacy(
    setting: DpSgdSetting, orders: Sequence[float] = DEFAULT_ORDERS, method: str = "tight"
) -> dict:
    """Full accountant report: epsilon, best_order, steps, q."""
    rdp = rdp_subsampled_gaussian(setting.q, setting.noise_multiplier, setting.steps, orders)
    eps, order = rdp_to_dp(rdp, orders, setting.delta, method)
    return {"epsilon": eps, "best_order": order, "steps": setting.steps, "q": setting.q}


def dpsgd_epsilon(
    setting: DpSgdSetting, orders: Sequence[float] = DEFAULT_ORDERS, method: str = "tight"
) -> float:
    return dpsgd_privacy(setting, orders, method)["epsilon"]


def noise_for_epsilon(
    target_epsilon: float,
    n: int,
    batch: int,
    epochs: float,
    delta: float = 1e-5,
    lo: float = 0.3,
    hi: float = 500.0,
    tol: float = 1e-4,
) -> float:
    """Smallest noise multiplier whose DP-SGD epsilon is <= target (bisection)."""
    def eps(z):
        return dpsgd_epsilon(DpSgdSetting(n, batch, epochs, z, 1.0, delta))

    if eps(hi) > target_epsilon:
        raise ValueError(f"target epsilon {target_epsilon} unreachable with noise <= {hi}")
    if eps(lo) <= target_epsilon:
        return lo
    while hi - lo > tol * lo:
        mid = 0.5 * (lo + hi)
        if eps(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def _rs_residual(eps_prime: float, xv: float, k: int, delta_fail: float) -> float:
    return xv - 4.0 / eps_prime * math.log(1.0 / (eps_prime * delta_fail * k))


def rs_epsilon_prime(x: float, v: int, k: int, delta_fail: float, tol: float = 1e-9) -> float:
    """Smallest ε' in (0, 1/2) with x·v >= (4/ε') ln(1/(ε' δ k)).

    ``x`` is the acceptable loss proportion, ``v`` the validation size, ``k``
    the number of candidates and ``delta_fail`` the probability of missing the
    target accuracy (not a DP delta).
    """
    if not 0 < x < 1:
        raise ValueError(f"x must be in (0, 1), got {x}")
    if v < 1 or k < 1:
        raise ValueError("v and k must be >= 1")
    if not 0 < delta_fail < 1:
        raise ValueError(f"delta_fail must be in (0, 1), got {delta_fail}")
    xv = x * v
    hi = 0.5
    if _rs_residual(hi, xv, k, delta_fail) < 0:
        need = 8.0 * math.log(1.0 / (0.5 * delta_fail * k)) / x
        raise InfeasibleBudgetError(
            f"no epsilon' < 1/2 satisfies the bound; need validation size v >= {math.ceil(need)}",
            required_v=need,
        )
    # residual -> -inf as eps' -> 0 and crosses zero once on (0, 1/2)
    lo = 1e-12
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _rs_residual(mid, xv, k, delta_fail) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


def rs_total_budget(eps_train: float, eps_prime: float) -> float:
    """Overall randomized-search budget ε + 8ε'."""
    if eps_train < 0 or eps_prime < 0:
        raise ValueError("budgets must be nonnegative")
    return eps_train + 8.0 * eps_prime


def mgrs_generation_budgets(
    eps_train: float, gen_sizes: Sequence[int], x: float, v: int, delta_fail: float
) -> list[float]:
    """Per-generation budgets for multi-generation randomized search.

    Each generation pays 8ε'_i for its selection step with k = k_i; the final
    model's training budget is charged once, in the first generation.
    """
    out = []
    for i, k in enumerate(gen_sizes):
        ep = rs_epsilon_prime(x, v, k, delta_fail)
        out.append(rs_total_budget(eps_train if i == 0 else 0.0, ep))
    return out


def mgrs_total_budget(per_generation: Sequence[float]) -> float:
    """Sequential composition over generations."""
    per_generation = list(per_generation)
    if not per_generation:
        raise ValueError("need at least one generation")
    if any(e < 0 for e in per_generation):
        raise ValueError("per-generation budgets must be nonnegative")
    return float(sum(per_generation))


def pafs_total_budget(
    eps: float, unique_trainings: int, delta_prime: float = DEFAULT_DELTA_PRIME
) -> float:
    return advanced_composition(eps, unique_trainings, delta_prime)
