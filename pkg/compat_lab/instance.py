"""Regression problem instances, seeded sampling and the factorization of the design.

Features are sampled directly in the covariance eigenbasis: x = Lambda^{1/2} z with
z having i.i.d. zero-mean unit-variance entries. Excess risk and every bound quantity
are rotation invariant, so no rotation is stored.
"""

from dataclasses import dataclass, field
from typing import List, Mapping, Optional

import torch
from einops import rearrange

from compat_lab.errors import ConfigError, RankDeficientSampleError
from compat_lab.spectrum import Spectrum, k0_dim, make_spectrum, spectrum_vector
from compat_lab.utils.seeding import make_generator
from compat_lab.utils.utils import config_value

FEATURE_LAWS = ("gaussian", "rademacher")
THETA_STAR_MODES = ("harmonic", "e1", "isotropic")

RANK_TOL = 1e-12


def make_theta_star(mode: str, p: int, norm: float = 1.0, seed: Optional[int] = None) -> torch.Tensor:
    """True parameter in eigenbasis coordinates.

    harmonic: proportional to (1, 1/2, ..., 1/p); e1: first basis vector;
    isotropic: uniformly random direction (needs `seed`). All scaled to `norm`.
    """
    if mode == "harmonic":
        theta = 1.0 / torch.arange(1, p + 1, dtype=torch.float64)
    elif mode == "e1":
        theta = torch.zeros(p, dtype=torch.float64)
        theta[0] = 1.0
    elif mode == "isotropic":
        if seed is None:
            raise ConfigError("theta_star_mode=isotropic needs a seed")
        theta = torch.randn(p, generator=make_generator(seed), dtype=torch.float64)
    else:
        raise ConfigError(f"unknown theta_star_mode {mode!r}; valid modes: {', '.join(THETA_STAR_MODES)}")
    if norm < 0:
        raise ConfigError(f"theta_star norm must be non-negative, got {norm}")
    return theta * (norm / theta.norm())


@dataclass(frozen=True)
class ProblemInstance:
    spectrum: Spectrum
    n: int
    p: int
    theta_star: torch.Tensor = field(repr=False)
    noise_sigma: float = 1.0
    feature_law: str = "gaussian"

    def __post_init__(self):
        if self.n < 1 or self.p <= self.n:
            raise ConfigError(f"overparameterized instance needs p > n >= 1, got n={self.n}, p={self.p}")
        if self.spectrum.p is not None and self.spectrum.p != self.p:
            raise ConfigError(f"spectrum dimension {self.spectrum.p} does not match p={self.p}")
        if self.theta_star.shape != (self.p,):
            raise ConfigError(f"theta_star must have shape ({self.p},), got {tuple(self.theta_star.shape)}")
        if not torch.isfinite(self.theta_star).all():
            raise ConfigError("theta_star must be finite")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.feature_law not in FEATURE_LAWS:
            raise ConfigError(f"unknown feature_law {self.feature_law!r}; valid laws: {', '.join(FEATURE_LAWS)}")

    @property
    def eigenvalues(self) -> torch.Tensor:
        return self.spectrum.vector(self.p)


def build_instance(spectrum_cfg: Mapping, instance_cfg: Mapping) -> ProblemInstance:
    """Instance from config sections {family, shape params} and
    {n, p, noise_sigma, theta_star_mode, theta_norm, theta_seed, feature_law}.

    For the n-dependent families p is taken from the spectrum.
    """
    n = config_value(instance_cfg, "n", int, section="instance")
    p = config_value(instance_cfg, "p", int, default=None, section="instance")
    family = spectrum_cfg.get("family")
    if family in ("inv_poly", "inv_log_poly"):
        if p is None:
            raise ConfigError("instance.p is required for sampling")
        spectrum = make_spectrum(spectrum_cfg, n=n, p=p)
    else:
        spectrum = make_spectrum(spectrum_cfg, n=n)
    p = spectrum.p
    theta_star = make_theta_star(instance_cfg.get("theta_star_mode", "harmonic"), p,
                                 norm=config_value(instance_cfg, "theta_norm", default=1.0, section="instance"),
                                 seed=config_value(instance_cfg, "theta_seed", int, default=None, section="instance"))
    return ProblemInstance(spectrum=spectrum, n=n, p=p, theta_star=theta_star,
                           noise_sigma=config_value(instance_cfg, "noise_sigma", default=1.0, section="instance"),
                           feature_law=instance_cfg.get("feature_law", "gaussian"))


@dataclass(frozen=True)
class SampledDataset:
    """One training set with the factorization X = U diag(sqrt(mu)) W^T.

    mu holds the eigenvalues of X X^T in non-increasing order.
    """
    X: torch.Tensor = field(repr=False)
    Y: torch.Tensor = field(repr=False)
    epsilon: torch.Tensor = field(repr=False)
    theta_star: torch.Tensor = field(repr=False)
    U: torch.Tensor = field(repr=False)
    mu: torch.Tensor = field(repr=False)
    W: torch.Tensor = field(repr=False)
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def g(self) -> torch.Tensor:
        """U^T Y, the response in the left singular basis."""
        return self.U.T @ self.Y


def factorize(X: torch.Tensor, seed: Optional[int] = None, rank_tol: float = RANK_TOL):
    """(U, mu, W) for a wide X through the eigendecomposition of the n x n Gram matrix."""
    gram = X @ X.T
    mu, U = torch.linalg.eigh(gram)
    mu, U = torch.flip(mu, (0,)), torch.flip(U, (1,))
    if mu[-1] <= rank_tol * mu[0]:
        raise RankDeficientSampleError([] if seed is None else [seed],
                                       ratio=(mu[-1] / mu[0]).item() if mu[0] > 0 else float("nan"))
    W = (X.T @ U) * rearrange(mu.rsqrt(), 'n -> 1 n')
    return U, mu, W


def dataset_from_arrays(X: torch.Tensor, theta_star: torch.Tensor, epsilon: torch.Tensor,
                        seed: Optional[int] = None) -> SampledDataset:
    X = X.to(torch.float64)
    Y = X @ theta_star + epsilon
    U, mu, W = factorize(X, seed=seed)
    return SampledDataset(X=X, Y=Y, epsilon=epsilon, theta_star=theta_star, U=U, mu=mu, W=W, seed=seed)


def sample_dataset(inst: ProblemInstance, seed: int) -> SampledDataset:
    """Draw n rows x_i = Lambda^{1/2} z_i and Y = X theta* + eps; deterministic in `seed`."""
    gen = make_generator(seed)
    shape = (inst.n, inst.p)
    if inst.feature_law == "gaussian":
        Z = torch.randn(shape, generator=gen, dtype=torch.float64)
    else:
        Z = torch.randint(0, 2, shape, generator=gen, dtype=torch.int64).to(torch.float64) * 2.0 - 1.0
    noise = torch.randn(inst.n, generator=gen, dtype=torch.float64) * inst.noise_sigma
    X = Z * spectrum_vector(inst.spectrum, inst.p).sqrt()
    return dataset_from_arrays(X, inst.theta_star, noise, seed=seed)


def _lambda_for(spectrum: Spectrum, p: int) -> torch.Tensor:
    if spectrum.p is not None and spectrum.p != p:
        raise ConfigError(f"vector length {p} does not match spectrum dimension {spectrum.p}")
    return spectrum.vector(p)


def exact_risk(spectrum: Spectrum, theta: torch.Tensor, theta_star: torch.Tensor) -> float:
    """R(theta) = 1/2 (theta - theta*)^T Sigma (theta - theta*)."""
    if theta.shape != theta_star.shape or theta.ndim != 1:
        raise ConfigError(f"theta and theta_star must be vectors of equal length, got "
                          f"{tuple(theta.shape)} and {tuple(theta_star.shape)}")
    lam = _lambda_for(spectrum, theta.shape[0])
    diff = theta.to(torch.float64) - theta_star.to(torch.float64)
    return 0.5 * torch.dot(lam, diff * diff).item()


def monte_carlo_risk(spectrum: Spectrum, thetas: torch.Tensor, theta_star: torch.Tensor,
                     num_samples: int, seed: int, chunk_size: int = 10_000,
                     feature_law: str = "gaussian") -> torch.Tensor:
    """Fresh-sample estimate 1/2 mean[(x^T theta - x^T theta*)^2] for each row of `thetas`.

    All rows share one pass over the same fresh samples.
    """
    thetas = torch.atleast_2d(thetas).to(torch.float64)
    p = thetas.shape[1]
    lam_sqrt = _lambda_for(spectrum, p).sqrt()
    # z^T (Lambda^{1/2} d) = x^T d
    directions = rearrange((thetas - theta_star) * lam_sqrt, 'k p -> p k')
    gen = make_generator(seed)
    total = torch.zeros(thetas.shape[0], dtype=torch.float64)
    done = 0
    while done < num_samples:
        m = min(chunk_size, num_samples - done)
        if feature_law == "gaussian":
            Z = torch.randn((m, p), generator=gen, dtype=torch.float64)
        else:
            Z = torch.randint(0, 2, (m, p), generator=gen, dtype=torch.int64).to(torch.float64) * 2.0 - 1.0
        total += (Z @ directions).pow(2).sum(0)
        done += m
    return 0.5 * total / num_samples


@dataclass(frozen=True)
class EigenSpreadReport:
    ks: List[int]
    ratios: List[float]

    @property
    def max_ratio(self) -> float:
        return max(self.ratios)


def eigen_spread_check(ds: SampledDataset, spectrum: Spectrum, n: int, c0: float = 1.0) -> EigenSpreadReport:
    """mu_{k+1} / (sum_{i>k} lambda_i + lambda_{k+1} n) for k in {0, k0, n-1}.

    The eigenvalue upper bound for X X^T says these ratios stay below a constant.
    """
    k0 = min(k0_dim(spectrum, n, c0), n - 1)
    ks = sorted({0, k0, n - 1})
    ratios = []
    for k in ks:
        denom = spectrum.tail_sum(k) + spectrum.eigenvalue(k + 1) * n
        ratios.append(ds.mu[k].item() / denom)
    return EigenSpreadReport(ks=ks, ratios=ratios)
