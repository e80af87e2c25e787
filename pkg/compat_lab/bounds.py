"""Time-variant generalization bounds along the gradient-descent trajectory.

Implicit constants of the bounds are 1, exposed as per-bound multipliers. The
bias bound carries the full concentration maximum including log(1/delta)/n.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from einops import rearrange

from compat_lab.errors import ConfigError, GridTooNarrowError, InstanceTooLargeError
from compat_lab.instance import SampledDataset
from compat_lab.spectrum import (Spectrum, SpectrumSource, effective_rank, effective_rank_R, k0_dim,
                                 k1_dim, k2_dim, make_spectrum)
from compat_lab.trajectory import filter_factors, geometric_grid, stable_learning_rate
from compat_lab.utils.fitting import loglog_slope
from compat_lab.utils.utils import config_value, get_logger

log = get_logger(__name__)

CTN_KINDS = ("constant", "power_law")

MAX_EXPLICIT_P = 200


@dataclass(frozen=True)
class CtnStrategy:
    """The weighting c(t, n): a constant, or n^(-beta)."""
    kind: str = "constant"
    value: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in CTN_KINDS:
            raise ConfigError(f"unknown c(t,n) kind {self.kind!r}; valid kinds: {', '.join(CTN_KINDS)}")
        if not self.value > 0:
            raise ConfigError(f"c(t,n) constant must be positive, got {self.value}")
        if self.beta < 0:
            raise ConfigError(f"c(t,n) power-law exponent must be non-negative, got {self.beta}")

    def __call__(self, t: float, n: int) -> float:
        if self.kind == "constant":
            return self.value
        return float(n) ** (-self.beta)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "CtnStrategy":
        return cls(kind=cfg.get("kind", "constant"),
                   value=config_value(cfg, "value", default=1.0, section="bounds.ctn"),
                   beta=config_value(cfg, "beta", default=0.0, section="bounds.ctn"))


def _check_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"confidence delta must lie in (0, 1), got {delta}")


def concentration_term(spectrum: Spectrum, n: int, delta: float) -> float:
    """max{sqrt(r/n), r/n, sqrt(log(1/delta)/n), log(1/delta)/n}."""
    _check_delta(delta)
    r = effective_rank(spectrum)
    log_delta = math.log(1.0 / delta)
    return max(math.sqrt(r / n), r / n, math.sqrt(log_delta / n), log_delta / n)


def bound_B(t: float, n: int, lr: float, theta_norm: float, spectrum: Spectrum, delta: float,
            multiplier: float = 1.0) -> float:
    """|theta*|^2 (1/(lr t) + |Sigma| max{...}); infinite at t = 0."""
    _check_delta(delta)
    if t < 0:
        raise ConfigError(f"epoch must be non-negative, got {t}")
    if t == 0:
        return math.inf
    return multiplier * theta_norm ** 2 * (1.0 / (lr * t) + spectrum.top * concentration_term(spectrum, n, delta))


def bound_V(t: float, n: int, lr: float, spectrum: Spectrum, delta: float, sigma_y: float,
            ctn: CtnStrategy, c2: float = 2.0, c1: float = 1.0, multiplier: float = 1.0,
            k1: Optional[int] = None, k2: Optional[int] = None) -> float:
    """sigma_y^2 log(1/delta) (k1/n + k2/(c n) + c (lr t sum(lambda) / n)^2) with c = c(t, n).

    `k1` / `k2` may be passed in when already known for this (n, c(t,n)).
    """
    _check_delta(delta)
    if sigma_y < 0:
        raise ConfigError(f"sigma_y must be non-negative, got {sigma_y}")
    c = ctn(t, n)
    if k1 is None:
        k1 = k1_dim(spectrum, n, c1)
    if k2 is None:
        k2 = k2_dim(spectrum, n, c2, c)
    growth = c * (lr * t * spectrum.total / n) ** 2
    return multiplier * sigma_y ** 2 * math.log(1.0 / delta) * (k1 / n + k2 / (c * n) + growth)


@dataclass(frozen=True)
class BCMatrices:
    B: torch.Tensor = field(repr=False)
    C: torch.Tensor = field(repr=False)
    bias_value: float
    variance_trace: float

    def variance_value(self, epsilon: torch.Tensor) -> float:
        return (epsilon @ self.C @ epsilon).item()


def explicit_BC_matrices(ds: SampledDataset, spectrum: Spectrum, lr: float, t: int) -> BCMatrices:
    """B = P^t Sigma P^t with P = I - (lr/n) X^T X, and
    C = (X X^T)^{-1} [I - Q^t] X Sigma X^T [I - Q^t] (X X^T)^{-1} with Q = I - (lr/n) X X^T.
    """
    if ds.p > MAX_EXPLICIT_P:
        raise InstanceTooLargeError(f"explicit bias/variance matrices are limited to p <= {MAX_EXPLICIT_P}, "
                                    f"got p={ds.p}")
    lam = spectrum.vector(ds.p)
    F = filter_factors(ds, lr, [t])[0]
    W, U = ds.W, ds.U
    power = torch.eye(ds.p, dtype=torch.float64) - (W * rearrange(F, 'n -> 1 n')) @ W.T
    B = power @ (rearrange(lam, 'p -> p 1') * power)
    gram_filter = (U * rearrange(F / ds.mu, 'n -> 1 n')) @ U.T
    X_sigma_Xt = (ds.X * rearrange(lam, 'p -> 1 p')) @ ds.X.T
    C = gram_filter @ X_sigma_Xt @ gram_filter
    B = 0.5 * (B + B.T)
    C = 0.5 * (C + C.T)
    return BCMatrices(B=B, C=C, bias_value=(ds.theta_star @ B @ ds.theta_star).item(),
                      variance_trace=torch.trace(C).item())


@dataclass(frozen=True)
class ComparisonBounds:
    bartlett: float
    zou: float
    k0: int
    k1: int


def comparison_bounds(spectrum: Spectrum, n: int, c0: float = 1.0, c1: float = 1.0) -> ComparisonBounds:
    """Min-norm variance rate k0/n + n/R_{k0}, and the one-pass SGD rate
    k1/n + n sum_{i>k1} lambda_i^2 / (sum lambda_i)^2."""
    k0 = k0_dim(spectrum, n, c0)
    k1 = k1_dim(spectrum, n, c1)
    bartlett = k0 / n + n / effective_rank_R(spectrum, k0)
    zou = k1 / n + n * spectrum.tail_sum_sq(k1) / spectrum.total ** 2
    return ComparisonBounds(bartlett=bartlett, zou=zou, k0=k0, k1=k1)


@dataclass(frozen=True)
class MinBound:
    t_star: int
    value: float
    target: Optional[float] = None
    t_grid: Tuple[int, ...] = field(default=(), repr=False)
    values: Tuple[float, ...] = field(default=(), repr=False)


def optimal_bound_target(spectrum: Spectrum, n: int, c1: float = 1.0) -> float:
    """max{sqrt(r), 1} / sqrt(n) + max{k1, 1} / n."""
    return max(math.sqrt(effective_rank(spectrum)), 1.0) / math.sqrt(n) + max(k1_dim(spectrum, n, c1), 1) / n


def min_bound_over_t(evaluate: Callable[[int], float], t_grid: Sequence[int],
                     spectrum: Optional[Spectrum] = None, n: Optional[int] = None,
                     c1: float = 1.0) -> MinBound:
    """Grid argmin of evaluate(t) over the positive epochs of `t_grid`.

    The grid has to bracket the minimum: the bound must decrease over its first
    two positive epochs and increase over its last two.
    """
    ts = [int(t) for t in t_grid if t > 0]
    if len(ts) < 3:
        raise GridTooNarrowError(f"need at least three positive epochs, got {list(t_grid)}")
    values = [evaluate(t) for t in ts]
    if not values[1] < values[0]:
        raise GridTooNarrowError(f"bound is not decreasing at the start of the grid (t={ts[0]}, {ts[1]})")
    if not values[-1] > values[-2]:
        raise GridTooNarrowError(f"bound is not increasing at the end of the grid (t={ts[-2]}, {ts[-1]})")
    best = min(range(len(values)), key=lambda i: (values[i], i))
    target = optimal_bound_target(spectrum, n, c1) if spectrum is not None and n is not None else None
    return MinBound(t_star=ts[best], value=values[best], target=target, t_grid=tuple(ts), values=tuple(values))


@dataclass(frozen=True)
class BoundReport:
    t_grid: Tuple[int, ...]
    B: List[float]
    V: List[float]
    k2: List[int]
    k0: int
    k1: int
    r_sigma: float
    bartlett_bound: float
    zou_bound: float
    delta: float
    sigma_y: float
    theta_norm: float
    n: int
    learning_rate: float

    @property
    def total(self) -> List[float]:
        return [b + v for b, v in zip(self.B, self.V)]

    def rows(self) -> List[Dict[str, float]]:
        return [{"t": t, "B_t": b, "V_t": v, "B_t+V_t": b + v, "k2_t": k2}
                for t, b, v, k2 in zip(self.t_grid, self.B, self.V, self.k2)]

    def summary(self) -> Dict[str, float]:
        return {"n": self.n, "learning_rate": self.learning_rate, "k0": self.k0, "k1": self.k1,
                "r_sigma": self.r_sigma, "bartlett_bound": self.bartlett_bound, "zou_bound": self.zou_bound,
                "delta": self.delta, "sigma_y": self.sigma_y, "theta_norm": self.theta_norm}


class BoundEvaluator:
    """B + V at one (spectrum, n), memoising k2 per value of c(t, n)."""

    def __init__(self, spectrum, n, lr, theta_norm=1.0, sigma_y=1.0, delta=0.05, ctn=None, c1=1.0, c2=2.0,
                 mult_B=1.0, mult_V=1.0):
        self.spectrum, self.n, self.lr = spectrum, n, lr
        self.theta_norm, self.sigma_y, self.delta = theta_norm, sigma_y, delta
        self.ctn, self.c1, self.c2 = ctn or CtnStrategy(), c1, c2
        self.mult_B, self.mult_V = mult_B, mult_V
        self.k1 = k1_dim(spectrum, n, c1)
        self._k2: Dict[float, int] = {}

    def k2(self, t) -> int:
        c = self.ctn(t, self.n)
        if c not in self._k2:
            self._k2[c] = k2_dim(self.spectrum, self.n, self.c2, c)
        return self._k2[c]

    def B(self, t) -> float:
        return bound_B(t, self.n, self.lr, self.theta_norm, self.spectrum, self.delta, self.mult_B)

    def V(self, t) -> float:
        return bound_V(t, self.n, self.lr, self.spectrum, self.delta, self.sigma_y, self.ctn, c2=self.c2,
                       c1=self.c1, multiplier=self.mult_V, k1=self.k1, k2=self.k2(t))

    def __call__(self, t) -> float:
        return self.B(t) + self.V(t)


def bound_report(spectrum: Spectrum, n: int, lr: float, t_grid: Sequence[int], theta_norm: float = 1.0,
                 sigma_y: float = 1.0, delta: float = 0.05, ctn: Optional[CtnStrategy] = None,
                 c0: float = 1.0, c1: float = 1.0, c2: float = 2.0, multiplier_B: float = 1.0,
                 multiplier_V: float = 1.0) -> BoundReport:
    ctn = ctn or CtnStrategy()
    ev = BoundEvaluator(spectrum, n, lr, theta_norm, sigma_y, delta, ctn, c1, c2, multiplier_B, multiplier_V)
    comp = comparison_bounds(spectrum, n, c0, c1)
    ts = tuple(int(t) for t in t_grid)
    return BoundReport(t_grid=ts, B=[ev.B(t) for t in ts], V=[ev.V(t) for t in ts], k2=[ev.k2(t) for t in ts],
                       k0=comp.k0, k1=ev.k1, r_sigma=effective_rank(spectrum), bartlett_bound=comp.bartlett,
                       zou_bound=comp.zou, delta=delta, sigma_y=sigma_y, theta_norm=theta_norm, n=n,
                       learning_rate=lr)


def optimize_ctn(t: float, n: int, lr: float, spectrum: Spectrum, betas: Sequence[float], delta: float = 0.05,
                 sigma_y: float = 1.0, c1: float = 1.0, c2: float = 2.0) -> Tuple[float, float]:
    """(beta*, V*): the power-law exponent of c(t,n) = n^(-beta) minimising V at epoch t."""
    if len(betas) == 0:
        raise ConfigError("optimize_ctn needs a non-empty beta grid")
    k1 = k1_dim(spectrum, n, c1)
    best = None
    for beta in betas:
        v = bound_V(t, n, lr, spectrum, delta, sigma_y, CtnStrategy(kind="power_law", beta=float(beta)),
                    c2=c2, c1=c1, k1=k1)
        if best is None or v < best[1]:
            best = (float(beta), v)
    return best


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    n_grid: List[int]
    min_bound: List[float]
    t_star: List[int]
    bartlett: List[float]
    zou: List[float]
    min_bound_slope: Optional[float]
    bartlett_slope: Optional[float]
    zou_slope: Optional[float]
    t_star_slope: Optional[float]

    def to_dict(self) -> Dict:
        return {"label": self.label, "min_bound_slope": self.min_bound_slope, "bartlett_slope": self.bartlett_slope,
                "zou_slope": self.zou_slope, "t_star_slope": self.t_star_slope,
                "n_grid": self.n_grid, "min_bound": self.min_bound, "t_star": self.t_star,
                "bartlett": self.bartlett, "zou": self.zou}


def rate_comparison(families: Mapping[str, SpectrumSource], n_grid: Sequence[int], p: Optional[int] = None,
                    lr: Optional[float] = None, theta_norm: float = 1.0, sigma_y: float = 1.0,
                    delta: float = 0.05, ctn: Optional[CtnStrategy] = None, c0: float = 1.0, c1: float = 1.0,
                    c2: float = 2.0, points_per_decade: int = 20,
                    t_max_factor: float = 100.0) -> List[ComparisonRow]:
    """Fitted log-log slopes against n of min_t(B+V), the min-norm rate and the one-pass SGD rate.

    The epoch grid per n is geometric up to t_max_factor * n / lr; lr defaults to the
    stable step size of each spectrum.
    """
    ctn = ctn or CtnStrategy()
    rows = []
    for label, family in families.items():
        min_bound, t_stars, bart, zou = [], [], [], []
        for n in n_grid:
            spectrum = family(n) if callable(family) else make_spectrum(family, n=n, p=p)
            step = stable_learning_rate(spectrum) if lr is None else lr
            ev = BoundEvaluator(spectrum, n, step, theta_norm, sigma_y, delta, ctn, c1, c2, 1.0, 1.0)
            best = min_bound_over_t(ev, geometric_grid(t_max_factor * n / step, points_per_decade))
            comp = comparison_bounds(spectrum, n, c0, c1)
            min_bound.append(best.value)
            t_stars.append(best.t_star)
            bart.append(comp.bartlett)
            zou.append(comp.zou)
            log.debug(f"rate_comparison {label} n={n}: min_bound={best.value:.4g} bartlett={comp.bartlett:.4g} "
                      f"zou={comp.zou:.4g}")
        ns = list(n_grid)
        rows.append(ComparisonRow(label=label, n_grid=ns, min_bound=min_bound, t_star=t_stars, bartlett=bart, zou=zou,
                                  min_bound_slope=loglog_slope(ns, min_bound), bartlett_slope=loglog_slope(ns, bart),
                                  zou_slope=loglog_slope(ns, zou), t_star_slope=loglog_slope(ns, t_stars)))
    return rows


def optimal_epoch_slope(spectrum_source: SpectrumSource, n_grid: Sequence[int], lr: float,
                        p: Optional[int] = None, theta_norm: float = 1.0, sigma_y: float = 1.0,
                        delta: float = 0.05, ctn: Optional[CtnStrategy] = None, c1: float = 1.0,
                        c2: float = 2.0, points_per_decade: int = 50) -> Tuple[Optional[float], List[MinBound]]:
    """Log-log slope against n of the epoch minimising B + V at a fixed learning rate."""
    ctn = ctn or CtnStrategy()
    results = []
    for n in n_grid:
        spectrum = spectrum_source(n) if callable(spectrum_source) else make_spectrum(spectrum_source, n=n, p=p)
        ev = BoundEvaluator(spectrum, n, lr, theta_norm, sigma_y, delta, ctn, c1, c2, 1.0, 1.0)
        results.append(min_bound_over_t(ev, geometric_grid(100.0 * n / lr, points_per_decade),
                                        spectrum=spectrum, n=n, c1=c1))
    return loglog_slope(list(n_grid), [r.t_star for r in results]), results


def power_law_exponents(alpha: float, tau: float) -> Tuple[float, float]:
    """For lambda_i = 1/i^alpha and t = n^tau: the balancing beta of c(t,n) = n^(-beta)
    and the resulting order of V in n."""
    beta = (2 * alpha * tau - alpha - 1) / (2 * alpha + 1)
    exponent = (2 * alpha * tau - 3 * alpha + 2 * tau - 1) / (2 * alpha + 1)
    return beta, exponent


def power_law_scan(spectrum_source: SpectrumSource, n_grid: Sequence[int], lr: float, tau: float,
                   betas: Sequence[float], p: Optional[int] = None, delta: float = 0.05, sigma_y: float = 1.0,
                   c1: float = 1.0, c2: float = 2.0) -> Tuple[Optional[float], List[Dict[str, float]]]:
    """min over `betas` of V at t = n^tau for each n, and the log-log slope of that minimum."""
    rows = []
    for n in n_grid:
        spectrum = spectrum_source(n) if callable(spectrum_source) else make_spectrum(spectrum_source, n=n, p=p)
        t = float(n) ** tau
        beta, value = optimize_ctn(t, n, lr, spectrum, betas, delta=delta, sigma_y=sigma_y, c1=c1, c2=c2)
        rows.append({"n": n, "t": t, "beta_star": beta, "V_star": value})
    return loglog_slope([r["n"] for r in rows], [r["V_star"] for r in rows]), rows
