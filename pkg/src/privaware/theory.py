"""Closed forms and Monte Carlo checks for the cost of DP noise.

Linear model with Gaussian output perturbation: the full model uses all m
coefficients with noise N(0, sigma^2 I); the reduced model drops the last
feature and uses noise N(0, sigma_prime^2 I) on the remaining m - 1.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .models import Model, TrainConfig, dpsgd_train, sgd_train
from .numerics import RngStream, cosine_distance

MC_CHUNK = 100_000


@dataclass
class LinearInstance:
    theta: np.ndarray
    x: np.ndarray
    y: float
    sigma: float
    sigma_prime: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        if self.theta.shape != self.x.shape:
            raise ValueError("theta and x must have the same length")
        if self.sigma < 0 or self.sigma_prime < 0:
            raise ValueError("noise scales must be nonnegative")

    @property
    def m(self) -> int:
        return self.x.size

    @property
    def c(self) -> float:
        """Residual y - theta^T x of the unperturbed full model."""
        return float(self.y - self.theta @ self.x)

    @property
    def x_reduced(self) -> np.ndarray:
        xr = self.x.copy()
        xr[-1] = 0.0
        return xr

    def with_theta_m(self, theta_m: float, keep_c: bool = True) -> LinearInstance:
        """Copy with the last coefficient replaced; ``keep_c`` shifts y so c is unchanged."""
        th = self.theta.copy()
        th[-1] = theta_m
        y = self.y + (theta_m - self.theta[-1]) * self.x[-1] if keep_c else self.y
        return replace(self, theta=th, y=y)


def squared_error(theta, x, y) -> float:
    theta, x = np.asarray(theta, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if theta.shape != x.shape:
        raise ValueError(f"shape mismatch: {theta.shape} vs {x.shape}")
    return float((y - theta @ x) ** 2)


def expected_dp_error_full(inst: LinearInstance) -> float:
    """c^2 + sigma^2 ||x||^2."""
    if not np.any(inst.x):
        raise ValueError("x must be nonzero")
    return inst.c ** 2 + inst.sigma ** 2 * float(inst.x @ inst.x)


def expected_dp_error_reduced(inst: LinearInstance) -> float:
    """(c + theta_m x_m)^2 + sigma'^2 ||x'||^2 with x' = x minus its last coordinate."""
    if inst.m < 2:
        raise ValueError("the reduced model needs m >= 2")
    if not np.any(inst.x):
        raise ValueError("x must be nonzero")
    c, tm, xm = inst.c, inst.theta[-1], inst.x[-1]
    xr = inst.x_reduced
    return c * c + 2 * c * tm * xm + (tm * xm) ** 2 + inst.sigma_prime ** 2 * float(xr @ xr)


def lemma1_threshold(inst: LinearInstance) -> float:
    """Largest |theta_m| for which dropping the last feature cannot hurt in expectation.

    (sqrt(c^2 + d) - |c|) / |x_m| with d = a^2 - b^2, a = sigma ||x||,
    b = sigma' ||x'||; 0 when c^2 + d < 0.
    """
    xm = inst.x[-1]
    if xm == 0:
        raise ValueError("x_m must be nonzero")
    xr = inst.x_reduced
    d = inst.sigma ** 2 * float(inst.x @ inst.x) - inst.sigma_prime ** 2 * float(xr @ xr)
    c_abs = math.sqrt(squared_error(inst.theta, inst.x, inst.y))
    if c_abs * c_abs + d < 0:
        return 0.0
    return (math.sqrt(c_abs * c_abs + d) - c_abs) / abs(xm)


def _noise_chunks(rng: RngStream, trials: int, m: int, chunk: int):
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        yield rng.normal(0.0, 1.0, size=(b, m))
        done += b


def mc_expected_error(model: str, inst: LinearInstance, trials: int, rng: RngStream,
                      chunk: int = MC_CHUNK) -> tuple[float, float]:
    """Brute-force mean squared error under output perturbation, with its standard error.

    ``model`` is "full" or "reduced". Both draw an (trials, m) standard normal
    matrix from ``rng`` (the reduced model ignores the last column), so calls
    with identically seeded streams share their noise.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if model == "full":
        theta, x, s = inst.theta, inst.x, inst.sigma
    elif model == "reduced":
        if inst.m < 2:
            raise ValueError("the reduced model needs m >= 2")
        theta, x, s = inst.theta.copy(), inst.x_reduced, inst.sigma_prime
        theta[-1] = 0.0
    else:
        raise ValueError(f"unknown model {model!r}")
    base = inst.y - float(theta @ x)
    if s == 0:
        return base * base, 0.0
    total = total_sq = 0.0
    for Z in _noise_chunks(rng, trials, inst.m, chunk):
        e = (base - s * (Z @ x)) ** 2
        total += float(e.sum())
        total_sq += float((e * e).sum())
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0)
    return mean, math.sqrt(var / trials)


@dataclass
class SweepResult:
    theta_m: np.ndarray
    full: np.ndarray
    reduced: np.ndarray
    flip: float | None  # empirical |theta_m| where reduced stops being no worse

    @property
    def reduced_no_worse(self) -> np.ndarray:
        return self.reduced <= self.full


def mc_error_sweep(inst: LinearInstance, theta_ms: Sequence[float], trials: int, rng: RngStream,
                   chunk: int = MC_CHUNK) -> SweepResult:
    """MC errors of both models over a sweep of theta_m, holding c fixed.

    One noise matrix is shared by every sweep point and both models. The
    empirical errors are quadratics in theta_m, so the positive root of their
    difference is reported as the empirical flip point.
    """
    if inst.m < 2:
        raise ValueError("the reduced model needs m >= 2")
    xm = inst.x[-1]
    xr = inst.x_reduced
    c = inst.c
    # the first two moments of the reduced noise term W' cover every theta_m
    s_full = s_w = s_w2 = 0.0
    for Z in _noise_chunks(rng, trials, inst.m, chunk):
        W = inst.sigma * (Z @ inst.x)
        Wr = inst.sigma_prime * (Z @ xr)
        s_full += float(((c - W) ** 2).sum())
        s_w += float(Wr.sum())
        s_w2 += float((Wr * Wr).sum())
    full_mean = s_full / trials
    mw, mw2 = s_w / trials, s_w2 / trials
    ths = np.asarray(theta_ms, dtype=np.float64)
    # reduced error for theta_m: E[(c + theta_m x_m - W')^2]
    u = c + ths * xm
    reduced = u * u - 2 * u * mw + mw2
    full = np.full_like(ths, full_mean)
    # roots of (c + t x_m)^2 - 2 (c + t x_m) mw + mw2 - full_mean = 0 in u
    disc = mw * mw - mw2 + full_mean
    flip = None
    if disc >= 0:
        roots_u = np.array([mw + math.sqrt(disc), mw - math.sqrt(disc)])
        roots_t = (roots_u - c) / xm
        pos = roots_t[roots_t > 0]
        flip = float(pos.min()) if pos.size else None
    return SweepResult(ths, full, reduced, flip)


def privacy_cost(err_dp: float, err_nonprivate: float) -> float:
    """Error gap caused by privacy; negative when DP acts as a regularizer."""
    return float(err_dp) - float(err_nonprivate)


# --- accuracy curves and crossover epsilon ---------------------------------------------

@dataclass
class AccuracyCurve:
    epsilon: np.ndarray
    metric: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64).ravel()
        self.metric = np.asarray(self.metric, dtype=np.float64).ravel()
        if self.epsilon.shape != self.metric.shape or self.epsilon.size == 0:
            raise ValueError("epsilon and metric must be equal-length and nonempty")
        if np.any(np.diff(self.epsilon) <= 0):
            raise ValueError("epsilon values must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "metric"])
            for e, m in zip(self.epsilon, self.metric):
                w.writerow([repr(float(e)), repr(float(m))])

    @classmethod
    def from_csv(cls, path, name: str = "") -> AccuracyCurve:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [h.strip() for h in rows[0]] != ["epsilon", "metric"]:
            raise ValueError(f"{path}: expected header 'epsilon,metric'")
        try:
            data = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
        except (ValueError, IndexError) as e:
            raise ValueError(f"{path}: bad row ({e})") from None
        if not data:
            raise ValueError(f"{path}: no data rows")
        e, m = zip(*data)
        return cls(np.array(e), np.array(m), name)


@dataclass
class CrossoverResult:
    status: str  # "finite", "infinity" or "none"
    value: float | None  # largest grid epsilon where the simple model strictly wins
    interpolated: float | None  # zero of the linearly interpolated metric difference
    sign_changes: list[float] = field(default_factory=list)
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status, "value": self.value, "interpolated": self.interpolated,
                "sign_changes": self.sign_changes, "diagnostic": self.diagnostic}


def crossover_epsilon(simple: AccuracyCurve, complex_: AccuracyCurve, higher_is_better: bool = True) -> CrossoverResult:
    """Crossover epsilon of two curves sampled on the same grid.

    The grid answer is the largest epsilon at which the simple model strictly
    wins. If it wins everywhere the result is "infinity"; if it never wins it
    is "none". ``interpolated`` places the last crossing by linear
    interpolation of the metric difference between grid points, and is None
    when the next grid point is infinite.
    """
    if simple.epsilon.shape != complex_.epsilon.shape or not np.allclose(simple.epsilon, complex_.epsilon,
                                                                         rtol=1e-12, atol=0):
        raise ValueError("curves must share the same epsilon grid")
    eps = simple.epsilon
    diff = simple.metric - complex_.metric
    if not higher_is_better:
        diff = -diff
    wins = diff > 0

    def crossing(i):
        # no meaningful interpolation toward a non-finite grid point (the noise-free run)
        if not np.isfinite(eps[i + 1]):
            return None
        a, b = diff[i], diff[i + 1]
        return float(eps[i] + (eps[i + 1] - eps[i]) * a / (a - b)) if a != b else float(eps[i + 1])

    changes = [crossing(i) for i in range(len(eps) - 1) if (diff[i] > 0) != (diff[i + 1] > 0)]
    if not wins.any():
        return CrossoverResult("none", None, None, changes,
                               "the simple model never outperforms the complex one on this grid")
    if wins.all():
        return CrossoverResult("infinity", math.inf, math.inf, changes,
                               "the simple model wins at every grid point")
    last = int(np.flatnonzero(wins)[-1])
    interp = None
    if last + 1 < len(eps):
        interp = crossing(last)
    diag = "" if len(changes) <= 1 else f"{len(changes)} sign changes; reporting the last"
    return CrossoverResult("finite", float(eps[last]), interp, changes, diag)


# --- effective sample size law ------------------------------------------------------------

@dataclass
class EpsFit:
    alpha: float
    beta: float
    residual: float  # RMS residual in epsilon
    alpha_clamped: bool = False

    def predict(self, n) -> np.ndarray:
        return np.log(self.alpha + self.beta / np.asarray(n, dtype=np.float64))


def fit_eps_vs_n(points: Sequence[tuple[float, float]]) -> EpsFit:
    """Least-squares fit of exp(eps) = alpha + beta / n; alpha is clamped to >= 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (n, epsilon) points")
    n, eps = pts[:, 0], pts[:, 1]
    if np.any(n <= 0):
        raise ValueError("n must be positive")
    if np.unique(n).size < 2:
        raise ValueError("need at least two distinct n values")
    A = np.column_stack([np.ones_like(n), 1.0 / n])
    (alpha, beta), *_ = np.linalg.lstsq(A, np.exp(eps), rcond=None)
    clamped = False
    if alpha < 1:
        clamped = True
        alpha = 1.0
        beta = float(np.dot(1.0 / n, np.exp(eps) - alpha) / np.dot(1.0 / n, 1.0 / n))
    arg = alpha + beta / n
    pred = np.log(np.where(arg > 0, arg, np.nan))
    res = float(np.sqrt(np.nanmean((pred - eps) ** 2)))
    return EpsFit(float(alpha), float(beta), res, clamped)


# --- synthetic convergence study -------------------------------------------------------------

def trace_distance(thetas_a: Sequence[np.ndarray], thetas_b: Sequence[np.ndarray]) -> list[tuple[int, float]]:
    """Per-epoch cosine distance between two recorded parameter trajectories."""
    if len(thetas_a) != len(thetas_b):
        raise ValueError("trajectories have different lengths")
    out = []
    for e, (a, b) in enumerate(zip(thetas_a, thetas_b), start=1):
        if np.shape(a) != np.shape(b):
            raise ValueError("architecture mismatch between the two runs")
        out.append((e, cosine_distance(a, b)))
    return out


def convergence_trace(model: Model, X, y, config: TrainConfig, rng: RngStream):
    """Train from the same start with SGD and with DP-SGD; return the per-epoch
    cosine distance of their parameters plus both trained models."""
    if not config.dp:
        raise ValueError("config needs clip_l2 and noise_multiplier for the DP run")
    sgd_cfg = replace(config, clip_l2=None, noise_multiplier=None)
    ta, tb = [], []
    # one stream for both runs: batching and dropout match, only the DP noise differs
    m_sgd = sgd_train(model, X, y, sgd_cfg, rng, on_epoch=lambda e, m: ta.append(m.theta.copy()))
    m_dp, eps = dpsgd_train(model, X, y, config, rng, on_epoch=lambda e, m: tb.append(m.theta.copy()))
    return trace_distance(tb, ta), m_sgd, m_dp, eps
