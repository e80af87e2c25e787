"""Gradient-descent trajectories from zero initialization and their exact excess risk.

With X = U diag(sqrt(mu)) W^T, every iterate lives in the row space of X:
theta_t = W a_t with a_t = (1 - (1 - lr mu / n)^t) * (U^T Y) / sqrt(mu).
Risks are evaluated from a_t through n x n reductions, so theta_t is never formed.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from einops import rearrange

from compat_lab.errors import ConfigError, DivergenceError, StabilityError
from compat_lab.instance import SampledDataset
from compat_lab.spectrum import Spectrum
from compat_lab.utils.fitting import loglog_slope
from compat_lab.utils.utils import config_list, config_value, get_logger

log = get_logger(__name__)

GRID_MODES = ("geometric", "explicit")

DIVERGENCE_FACTOR = 1e6


def stable_learning_rate(spectrum: Spectrum, c: float = 2.0) -> float:
    """1 / (c * sum_i lambda_i); c = 2 is the default step size."""
    if c <= 0:
        raise ConfigError(f"stability constant must be positive, got {c}")
    return 1.0 / (c * spectrum.total)


def geometric_grid(t_max: float, points_per_decade: int = 20) -> Tuple[int, ...]:
    """0 followed by distinct rounded values of 10^(k / points_per_decade) up to t_max."""
    if points_per_decade < 1:
        raise ConfigError(f"points_per_decade must be positive, got {points_per_decade}")
    if t_max < 1:
        return (0,)
    steps = int(math.floor(math.log10(t_max) * points_per_decade + 1e-9))
    exps = torch.arange(0, steps + 1, dtype=torch.float64) / points_per_decade
    ts = torch.pow(10.0, exps).round().to(torch.int64).tolist() + [int(round(t_max))]
    grid = [0]
    for t in ts:
        if t > grid[-1]:
            grid.append(t)
    return tuple(grid)


@dataclass(frozen=True)
class TrajectoryConfig:
    learning_rate: float
    t_grid: Tuple[int, ...]
    grid_mode: str = "geometric"
    points_per_decade: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be positive and finite, got {self.learning_rate}")
        if self.grid_mode not in GRID_MODES:
            raise ConfigError(f"unknown grid_mode {self.grid_mode!r}; valid modes: {', '.join(GRID_MODES)}")
        if len(self.t_grid) == 0:
            raise ConfigError("t_grid must not be empty")
        if self.t_grid[0] < 0:
            raise ConfigError(f"t_grid must start at a non-negative epoch, got {self.t_grid[0]}")
        if any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ConfigError("t_grid must be strictly increasing")

    @classmethod
    def from_config(cls, cfg: Mapping, spectrum: Spectrum, n: int) -> "TrajectoryConfig":
        """Section keys: learning_rate (null = stable default), stability_c, grid_mode,
        points_per_decade, t_max (null = 100 n / lr) and t_grid (explicit mode).

        A learning rate above 1 / (stability_c * sum lambda) raises StabilityError.
        """
        c = config_value(cfg, "stability_c", default=2.0, section="trajectory")
        threshold = stable_learning_rate(spectrum, c)
        lr = config_value(cfg, "learning_rate", default=threshold, section="trajectory")
        if lr > threshold * (1 + 1e-12):
            raise StabilityError(f"learning rate {lr:.6g} exceeds the stability threshold "
                                 f"1/({c:g} * sum lambda) = {threshold:.6g}")
        mode = cfg.get("grid_mode", "geometric")
        ppd = config_value(cfg, "points_per_decade", int, default=20, section="trajectory")
        if mode == "explicit":
            t_grid = config_list(cfg, "t_grid", int, section="trajectory")
        else:
            t_max = config_value(cfg, "t_max", default=100.0 * n / lr, section="trajectory")
            t_grid = geometric_grid(t_max, ppd)
        return cls(learning_rate=lr, t_grid=t_grid, grid_mode=mode, points_per_decade=ppd)


def filter_factors(ds: SampledDataset, lr: float, ts) -> torch.Tensor:
    """1 - (1 - lr mu_i / n)^t for every t in `ts` (rows) and every i (columns)."""
    n = ds.n
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if lr * ds.mu[0].item() / n >= 1:
        raise StabilityError(f"lr * mu_1 / n = {lr * ds.mu[0].item() / n:.4g} >= 1: "
                             "the contraction factor is non-positive, reduce the learning rate")
    ts = torch.as_tensor(ts, dtype=torch.float64)
    log_contraction = torch.log1p(-lr * ds.mu / n)
    return -torch.expm1(rearrange(ts, 't -> t 1') * rearrange(log_contraction, 'n -> 1 n'))


def closed_form_theta(ds: SampledDataset, lr: float, t: int) -> torch.Tensor:
    if t < 0:
        raise ConfigError(f"epoch must be non-negative, got {t}")
    a = filter_factors(ds, lr, [t])[0] * ds.g / ds.mu.sqrt()
    return ds.W @ a


def min_norm(ds: SampledDataset) -> torch.Tensor:
    """X^T (X X^T)^{-1} Y, the minimum-norm interpolator."""
    return ds.W @ (ds.g / ds.mu.sqrt())


def gd_iterative(ds: SampledDataset, theta0: torch.Tensor, lr: float, T: int) -> torch.Tensor:
    """theta_0 .. theta_T of theta_{t+1} = theta_t - (lr / n) X^T (X theta_t - Y), stacked as (T + 1, p)."""
    if lr < 0 or T < 0:
        raise ConfigError(f"gd_iterative needs lr >= 0 and T >= 0, got lr={lr}, T={T}")
    X, Y, n = ds.X, ds.Y, ds.n
    limit = DIVERGENCE_FACTOR * (min_norm(ds).norm().item() + ds.theta_star.norm().item())
    thetas = [theta0.to(torch.float64)]
    theta = thetas[0]
    for t in range(T):
        theta = theta - (lr / n) * (X.T @ (X @ theta - Y))
        norm = theta.norm().item()
        if not math.isfinite(norm) or (limit > 0 and norm > limit):
            raise DivergenceError(f"gradient descent diverged at step {t + 1} (|theta| = {norm:.3e}); "
                                  f"lr * mu_1 / n = {lr * ds.mu[0].item() / n:.4g} must stay below 1")
        thetas.append(theta)
    return torch.stack(thetas)


@dataclass(frozen=True)
class RiskTrajectory:
    t_grid: Tuple[int, ...]
    risk: torch.Tensor
    min_norm_risk: float
    learning_rate: float
    n: int
    param_norm: Optional[torch.Tensor] = None
    bias_part: Optional[torch.Tensor] = None
    variance_part: Optional[torch.Tensor] = None
    mu_max: Optional[float] = None

    @property
    def argmin_index(self) -> int:
        return torch.nonzero(self.risk == self.risk.min())[0, 0].item()

    @property
    def argmin_t(self) -> int:
        """First grid epoch attaining the minimal risk."""
        return self.t_grid[self.argmin_index]

    @property
    def optimal_risk(self) -> float:
        return self.risk.min().item()

    @property
    def final_gap(self) -> float:
        return self.risk[-1].item() - self.min_norm_risk

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for i, t in enumerate(self.t_grid):
            row = {"t": t, "risk": self.risk[i].item()}
            if self.bias_part is not None:
                row["bias_part"] = self.bias_part[i].item()
                row["variance_part"] = self.variance_part[i].item()
            if self.param_norm is not None:
                row["param_norm"] = self.param_norm[i].item()
            out.append(row)
        return out

    def summary(self) -> Dict[str, float]:
        return {"min_norm_risk": self.min_norm_risk, "argmin_t": self.argmin_t,
                "optimal_risk": self.optimal_risk, "final_risk": self.risk[-1].item(),
                "final_gap": self.final_gap, "learning_rate": self.learning_rate, "n": self.n}


def _quadratic(A: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    return torch.einsum('ti,ij,tj->t', A, M, A)


def risk_trajectory(ds: SampledDataset, spectrum: Spectrum, theta_star: torch.Tensor,
                    cfg: TrajectoryConfig, decompose: bool = False) -> RiskTrajectory:
    """Exact R(theta_t) on cfg.t_grid via M = W^T Sigma W, b = W^T Sigma theta*, c = theta*^T Sigma theta*.

    With `decompose`, also splits the risk into the signal part 1/2 theta*^T B theta*
    and the noise part 1/2 eps^T C eps of the bias/variance decomposition.
    """
    lam = spectrum.vector(ds.p)
    W = ds.W
    lam_W = rearrange(lam, 'p -> p 1') * W
    M = W.T @ lam_W
    b = lam_W.T @ theta_star
    c = torch.dot(lam, theta_star * theta_star)

    F = filter_factors(ds, cfg.learning_rate, cfg.t_grid)
    inv_sqrt_mu = ds.mu.rsqrt()
    A = F * rearrange(ds.g * inv_sqrt_mu, 'n -> 1 n')
    risk = (0.5 * (_quadratic(A, M) - 2.0 * (A @ b) + c)).clamp(min=0.0)

    a_inf = ds.g * inv_sqrt_mu
    min_norm_risk = max(0.5 * (a_inf @ M @ a_inf - 2.0 * torch.dot(a_inf, b) + c).item(), 0.0)

    bias_part = variance_part = None
    if decompose:
        A_signal = F * rearrange(W.T @ theta_star, 'n -> 1 n')
        A_noise = F * rearrange((ds.U.T @ ds.epsilon) * inv_sqrt_mu, 'n -> 1 n')
        bias_part = (0.5 * (_quadratic(A_signal, M) - 2.0 * (A_signal @ b) + c)).clamp(min=0.0)
        variance_part = 0.5 * _quadratic(A_noise, M)

    return RiskTrajectory(t_grid=tuple(cfg.t_grid), risk=risk, min_norm_risk=min_norm_risk,
                          learning_rate=cfg.learning_rate, n=ds.n, param_norm=A.norm(dim=1),
                          bias_part=bias_part, variance_part=variance_part, mu_max=ds.mu[0].item())


def average_trajectories(trajectories: Sequence[RiskTrajectory]) -> RiskTrajectory:
    """Pointwise mean over trials sharing one grid."""
    if not trajectories:
        raise ConfigError("cannot average an empty list of trajectories")
    first = trajectories[0]
    if any(tr.t_grid != first.t_grid for tr in trajectories):
        raise ConfigError("trajectories must share one epoch grid to be averaged")

    def mean_of(attr):
        vals = [getattr(tr, attr) for tr in trajectories]
        return None if any(v is None for v in vals) else torch.stack(vals).mean(0)

    mu_max = [tr.mu_max for tr in trajectories if tr.mu_max is not None]
    return RiskTrajectory(t_grid=first.t_grid, risk=mean_of("risk"),
                          min_norm_risk=sum(tr.min_norm_risk for tr in trajectories) / len(trajectories),
                          learning_rate=first.learning_rate, n=first.n,
                          param_norm=mean_of("param_norm"), bias_part=mean_of("bias_part"),
                          variance_part=mean_of("variance_part"),
                          mu_max=sum(mu_max) / len(mu_max) if mu_max else None)


@dataclass(frozen=True)
class RegionInterval:
    """Longest run of grid epochs with mean risk <= threshold.

    `start_scaled` is t * lr (units of 1/lr); `stop_scaled` is t * lr / n (units of n/lr).
    """
    n: int
    threshold: float
    start_t: Optional[int] = None
    stop_t: Optional[int] = None
    start_scaled: Optional[float] = None
    stop_scaled: Optional[float] = None
    learning_rate: float = field(default=0.0, repr=False)

    @property
    def empty(self) -> bool:
        return self.start_t is None


def _longest_run(mask: List[bool]) -> Optional[Tuple[int, int]]:
    best, start = None, None
    for i, ok in enumerate(mask + [False]):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            if best is None or (i - 1 - start) > (best[1] - best[0]):
                best = (start, i - 1)
            start = None
    return best


def region_scan(trajectories: Mapping[int, RiskTrajectory], threshold: float) -> List[RegionInterval]:
    """Per sample size, the maximal contiguous grid interval with risk <= threshold.

    Ties between equally long runs resolve to the earliest one.
    """
    out = []
    for n in sorted(trajectories):
        traj = trajectories[n]
        run = _longest_run((traj.risk <= threshold).tolist())
        if run is None:
            out.append(RegionInterval(n=n, threshold=threshold, learning_rate=traj.learning_rate))
            continue
        lo, hi = traj.t_grid[run[0]], traj.t_grid[run[1]]
        lr = traj.learning_rate
        out.append(RegionInterval(n=n, threshold=threshold, start_t=lo, stop_t=hi,
                                  start_scaled=lo * lr, stop_scaled=hi * lr / n, learning_rate=lr))
        log.debug(f"region_scan n={n}: [{lo}, {hi}] epochs")
    return out


def norm_growth_slope(traj: RiskTrajectory, t_max: Optional[float] = None) -> Optional[float]:
    """Log-log slope of |theta_t| against t on 1 <= t <= t_max.

    The default segment stops at 0.1 n / (lr mu_1), before the leading direction saturates.
    """
    if traj.param_norm is None:
        raise ConfigError("trajectory carries no parameter-norm path")
    if t_max is None:
        if traj.mu_max is None:
            raise ConfigError("t_max is required when the trajectory has no mu_1")
        t_max = 0.1 * traj.n / (traj.learning_rate * traj.mu_max)
    pts = [(t, traj.param_norm[i].item()) for i, t in enumerate(traj.t_grid) if 1 <= t <= t_max]
    return loglog_slope([t for t, _ in pts], [v for _, v in pts])
