"""Covariance spectra, tail sums, effective ranks and effective dimensions.

Eigenvalue indices are 1-based throughout (lambda_1 >= lambda_2 >= ...), matching
the tail-sum notation sum_{i>k} lambda_i. Every spectrum is expressed in its own
eigenbasis: the covariance is diag(lambda_1, ..., lambda_p).
"""

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, List, Mapping, Optional, Sequence, Union

import torch
from einops import rearrange
from scipy import integrate

from compat_lab.errors import (ConfigError, DivisionGuardError, ScanCapError, SpectrumIndexError,
                               UnknownFamilyError, UnsupportedTailError)
from compat_lab.utils.fitting import loglog_slope
from compat_lab.utils.utils import config_list, config_value, get_logger

log = get_logger(__name__)

FAMILIES = ("inv_poly", "inv_log_poly", "constant", "piecewise_constant", "explicit")

# Direct summation below this index, Euler-Maclaurin with an integral remainder above it.
_EM_SPLIT = 1000
_MACHINE_EPS = torch.finfo(torch.float64).eps


def ceil_pow(n: int, exponent: float) -> int:
    """ceil(n ** exponent), robust to round-off when the power is an integer."""
    v = float(n) ** exponent
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, v):
        return int(r)
    return int(math.ceil(v))


def scan_cap(n: int) -> int:
    return 10 * int(n) + 10 ** 6


class Spectrum:
    """Non-increasing, summable eigenvalue sequence.

    Subclasses implement `_values` (vectorised lambda_i for 1-based indices inside
    the range) and, when `p is None`, `_infinite_tail`.
    """

    family: str
    p: Optional[int]

    @property
    def is_infinite(self) -> bool:
        return self.p is None

    def _values(self, idx: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _infinite_tail(self, k: int, power: int) -> float:
        raise UnsupportedTailError(f"{self!r} has no analytic tail for p = infinity")

    def eigenvalues(self, idx) -> torch.Tensor:
        """lambda_i for a tensor of 1-based indices; indices beyond a finite p give 0."""
        idx = torch.as_tensor(idx, dtype=torch.int64)
        if self.p is None:
            return self._values(idx)
        inside = idx <= self.p
        vals = self._values(idx.clamp(max=self.p))
        return torch.where(inside, vals, torch.zeros_like(vals))

    def eigenvalue(self, i: int) -> float:
        if i < 1 or (self.p is not None and i > self.p):
            raise SpectrumIndexError(f"eigenvalue index {i} outside 1..{self.p if self.p is not None else 'inf'}")
        return self._values(torch.tensor([i], dtype=torch.int64))[0].item()

    def vector(self, p: Optional[int] = None) -> torch.Tensor:
        """The first p eigenvalues as a float64 tensor (default: the whole finite spectrum)."""
        if p is None:
            if self.p is None:
                raise UnsupportedTailError(f"cannot materialise all eigenvalues of infinite {self!r}")
            p = self.p
        if self.p is not None and p > self.p:
            raise SpectrumIndexError(f"requested {p} eigenvalues but {self!r} has only {self.p}")
        return self._values(torch.arange(1, p + 1, dtype=torch.int64))

    @cached_property
    def _tails(self) -> torch.Tensor:
        # _tails[k] = sum_{i>k} lambda_i for k = 0..p, so tail(k) = tail(k+1) + lambda_{k+1}.
        lam = self.vector()
        rev = torch.flip(torch.cumsum(torch.flip(lam, (0,)), 0), (0,))
        return torch.cat([rev, rev.new_zeros(1)])

    @cached_property
    def _tails_sq(self) -> torch.Tensor:
        lam = self.vector() ** 2
        rev = torch.flip(torch.cumsum(torch.flip(lam, (0,)), 0), (0,))
        return torch.cat([rev, rev.new_zeros(1)])

    def tail_sum(self, k: int) -> float:
        """sum_{i>k} lambda_i."""
        if k < 0:
            raise SpectrumIndexError(f"tail index must be non-negative, got {k}")
        if self.p is None:
            return self._infinite_tail(int(k), 1)
        return 0.0 if k >= self.p else self._tails[k].item()

    def tail_sum_sq(self, k: int) -> float:
        """sum_{i>k} lambda_i ** 2."""
        if k < 0:
            raise SpectrumIndexError(f"tail index must be non-negative, got {k}")
        if self.p is None:
            return self._infinite_tail(int(k), 2)
        return 0.0 if k >= self.p else self._tails_sq[k].item()

    def tail_block(self, start: int, stop: int) -> torch.Tensor:
        """Tail sums for l = start .. stop - 1."""
        if self.p is not None:
            idx = torch.arange(start, stop, dtype=torch.int64).clamp(max=self.p)
            return self._tails[idx]
        lam = self.eigenvalues(torch.arange(start + 1, stop + 1, dtype=torch.int64))
        consumed = torch.cat([lam.new_zeros(1), torch.cumsum(lam, 0)[:-1]])
        return (self.tail_sum(start) - consumed).clamp(min=0.0)

    @property
    def total(self) -> float:
        return self.tail_sum(0)

    @property
    def top(self) -> float:
        return self.eigenvalue(1)

    def truncated(self, p: int) -> "Spectrum":
        raise UnsupportedTailError(f"{self!r} has a fixed dimension and cannot be truncated to p={p}")


def _check_p(p):
    if p is not None and p < 1:
        raise ConfigError(f"dimension p must be a positive integer or None (infinite), got {p}")


@dataclass(frozen=True)
class InversePolynomial(Spectrum):
    """lambda_i = 1 / i^alpha."""

    alpha: float
    p: Optional[int] = None
    family: str = field(default="inv_poly", init=False)

    def __post_init__(self):
        _check_p(self.p)
        if self.alpha <= 0:
            raise ConfigError(f"inv_poly needs alpha > 0, got {self.alpha}")
        if self.p is None and self.alpha <= 1:
            raise ConfigError(f"inv_poly with p = infinity needs alpha > 1 to be summable, got {self.alpha}")

    def _values(self, idx):
        return idx.to(torch.float64).pow(-self.alpha)

    def _infinite_tail(self, k, power):
        # Hurwitz zeta: sum_{i>=k+1} i^{-s}
        s = torch.tensor(power * self.alpha, dtype=torch.float64)
        return torch.special.zeta(s, torch.tensor(k + 1.0, dtype=torch.float64)).item()

    def truncated(self, p):
        return replace(self, p=p)


@dataclass(frozen=True)
class InverseLogPolynomial(Spectrum):
    """lambda_i = 1 / (i * log(i + 1)^beta), natural logarithm."""

    beta: float
    p: Optional[int] = None
    family: str = field(default="inv_log_poly", init=False)

    def __post_init__(self):
        _check_p(self.p)
        if self.beta <= 0:
            raise ConfigError(f"inv_log_poly needs beta > 0, got {self.beta}")
        if self.p is None and self.beta <= 1:
            raise ConfigError(f"inv_log_poly with p = infinity needs beta > 1 to be summable, got {self.beta}")

    def _values(self, idx):
        x = idx.to(torch.float64)
        return 1.0 / (x * torch.log1p(x).pow(self.beta))

    def _integral(self, m: int, power: int) -> float:
        # int_m^inf dx / (x log(x+1)^beta)^power, substituting x = e^u.
        beta = self.beta
        lo = math.log(m)
        if power == 1:
            head = lo ** (1.0 - beta) / (beta - 1.0)

            def correction(u):
                return (u + math.log1p(math.exp(-u))) ** (-beta) - u ** (-beta)

            rest, _ = integrate.quad(correction, lo, math.inf, epsabs=1e-15, epsrel=1e-12, limit=200)
            return head + rest

        def integrand(u):
            return math.exp(-(power - 1) * u) * (u + math.log1p(math.exp(-u))) ** (-power * beta)

        val, _ = integrate.quad(integrand, lo, math.inf, epsabs=1e-16, epsrel=1e-12, limit=200)
        return val

    def _infinite_tail(self, k, power):
        m = max(k + 1, _EM_SPLIT)
        head = self.eigenvalues(torch.arange(k + 1, m, dtype=torch.int64)).pow(power).sum().item()
        x = float(m)
        log_x = math.log1p(x)
        f = (x * log_x ** self.beta) ** (-power)
        fprime = -f * power * (1.0 / x + self.beta / ((x + 1.0) * log_x))
        # Euler-Maclaurin: sum_{i>=m} f(i) = int_m^inf f + f(m)/2 - f'(m)/12 + O(f''')
        return head + self._integral(m, power) + f / 2.0 - fprime / 12.0

    def truncated(self, p):
        return replace(self, p=p)


@dataclass(frozen=True)
class Constant(Spectrum):
    """N = ceil(n^{1+eps}) equal eigenvalues 1/N."""

    eps: float
    n: int
    family: str = field(default="constant", init=False)
    p: int = field(init=False)

    def __post_init__(self):
        if self.eps <= 0 or self.n < 1:
            raise ConfigError(f"constant family needs eps > 0 and n >= 1, got eps={self.eps}, n={self.n}")
        object.__setattr__(self, "p", ceil_pow(self.n, 1.0 + self.eps))

    def _values(self, idx):
        return torch.full(idx.shape, 1.0 / self.p, dtype=torch.float64)


@dataclass(frozen=True)
class PiecewiseConstant(Spectrum):
    """s = ceil(n^r) eigenvalues 1/s followed by d - s eigenvalues 1/(d - s), d = ceil(n^q)."""

    r: float
    q: float
    n: int
    family: str = field(default="piecewise_constant", init=False)
    p: int = field(init=False)
    s: int = field(init=False)

    def __post_init__(self):
        if not (0 < self.r <= 1) or self.q < 1 or self.n < 1:
            raise ConfigError(f"piecewise_constant needs 0 < r <= 1, q >= 1, got r={self.r}, q={self.q}")
        s = ceil_pow(self.n, self.r)
        d = ceil_pow(self.n, self.q)
        if d <= s:
            raise ConfigError(f"piecewise_constant needs d = ceil(n^q) > s = ceil(n^r), got d={d}, s={s}")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "p", d)

    def _values(self, idx):
        head = torch.full(idx.shape, 1.0 / self.s, dtype=torch.float64)
        tail = torch.full(idx.shape, 1.0 / (self.p - self.s), dtype=torch.float64)
        return torch.where(idx <= self.s, head, tail)


@dataclass(frozen=True)
class Explicit(Spectrum):
    values: tuple
    family: str = field(default="explicit", init=False)
    p: int = field(init=False)

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ConfigError("explicit spectrum needs at least one eigenvalue")
        if any(v <= 0 for v in vals):
            raise ConfigError("explicit spectrum eigenvalues must be positive")
        if any(a < b for a, b in zip(vals, vals[1:])):
            raise ConfigError("explicit spectrum eigenvalues must be non-increasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "p", len(vals))

    @cached_property
    def _table(self):
        return torch.tensor(self.values, dtype=torch.float64)

    def _values(self, idx):
        return self._table[idx - 1]


def make_spectrum(cfg: Mapping, n: Optional[int] = None, p: Optional[int] = None) -> Spectrum:
    """Build a spectrum from a config mapping {family, shape params[, p]}.

    `p` overrides cfg["p"]; `n` is required by the n-dependent families.
    """
    family = cfg.get("family")
    if family not in FAMILIES:
        raise UnknownFamilyError(family, FAMILIES)
    if p is None:
        p = config_value(cfg, "p", int, default=None, section="spectrum")
    if family == "inv_poly":
        return InversePolynomial(alpha=config_value(cfg, "alpha", section="spectrum"), p=p)
    if family == "inv_log_poly":
        return InverseLogPolynomial(beta=config_value(cfg, "beta", section="spectrum"), p=p)
    if family == "explicit":
        return Explicit(values=config_list(cfg, "values", section="spectrum"))
    if n is None:
        raise ConfigError(f"spectrum family {family!r} depends on the sample size n")
    if family == "constant":
        return Constant(eps=config_value(cfg, "eps", section="spectrum"), n=int(n))
    return PiecewiseConstant(r=config_value(cfg, "r", section="spectrum"), q=config_value(cfg, "q", section="spectrum"),
                             n=int(n))


def spectrum_label(cfg: Mapping) -> str:
    """Short identifier used in file names and table rows, e.g. inv_poly_a2."""
    family = cfg.get("family")
    if family == "inv_poly":
        return f"inv_poly_a{cfg['alpha']:g}"
    if family == "inv_log_poly":
        return f"inv_log_poly_b{cfg['beta']:g}"
    if family == "constant":
        return f"constant_e{cfg['eps']:g}"
    if family == "piecewise_constant":
        return f"piecewise_constant_r{cfg['r']:g}_q{cfg['q']:g}"
    if family == "explicit":
        return f"explicit_{len(cfg['values'])}"
    raise UnknownFamilyError(family, FAMILIES)


def spectrum_formula(cfg: Mapping) -> str:
    family = cfg.get("family")
    if family == "inv_poly":
        return "1/i" if cfg["alpha"] == 1 else f"1/i^{cfg['alpha']:g}"
    if family == "inv_log_poly":
        b = cfg["beta"]
        return "1/(i log(i+1))" if b == 1 else f"1/(i log^{b:g}(i+1))"
    if family == "constant":
        return f"1/n^(1+{cfg['eps']:g})"
    if family == "piecewise_constant":
        return f"piecewise(r={cfg['r']:g}, q={cfg['q']:g})"
    return "explicit"


def k1_order_tag(cfg: Mapping) -> str:
    """Asymptotic order of k1(n) for the family, as printed in the result tables."""
    family = cfg.get("family")
    if family == "inv_poly":
        return f"Θ(n^(1/{cfg['alpha']:g}))"
    if family == "inv_log_poly":
        b = cfg["beta"]
        return "Θ(n/log n)" if b == 1 else f"Θ(n/log^{b:g} n)"
    if family == "constant":
        return "0"
    if family == "piecewise_constant":
        return f"Θ(n^{cfg['r']:g})"
    return "-"


def _first_index(spectrum: Spectrum, n: int, condition: Callable, cap: Optional[int] = None) -> int:
    """Smallest l >= 0 with condition(l, lambda_{l+1}, sum_{i>l} lambda_i) true.

    Ascending scan, vectorised over geometrically growing blocks. For finite p the
    scan always terminates at l = p (empty tail); for infinite p it stops at the
    scan cap or once lambda_{l+1} has fallen below machine precision of lambda_1.
    """
    limit = spectrum.p if spectrum.p is not None else (scan_cap(n) if cap is None else cap)
    floor = _MACHINE_EPS * spectrum.top
    start, block = 0, 256
    while start <= limit:
        stop = min(start + block, limit + 1)
        ls = torch.arange(start, stop, dtype=torch.int64)
        lam_next = spectrum.eigenvalues(ls + 1)
        tails = spectrum.tail_block(start, stop)
        hit = torch.nonzero(condition(ls, lam_next, tails))
        if hit.numel() > 0:
            return start + hit[0, 0].item()
        if spectrum.p is None and lam_next[-1].item() < floor:
            break
        start = stop
        block = min(block * 2, 1 << 20)
    raise ScanCapError(spectrum, min(limit, start))


@dataclass(frozen=True)
class EffectiveDims:
    k0: int
    k1: int
    r_sigma: float
    n: int
    c0: float = 1.0
    c1: float = 1.0
    spectrum: Optional[Spectrum] = field(default=None, repr=False, compare=False)

    def R_k(self, k: int) -> float:
        if self.spectrum is None:
            raise ConfigError("R_k needs the spectrum these dimensions were computed from")
        return effective_rank_R(self.spectrum, k)


def effective_rank(spectrum: Spectrum) -> float:
    """r(Sigma) = sum_i lambda_i / lambda_1."""
    return spectrum.total / spectrum.top


def effective_rank_R(spectrum: Spectrum, k: int) -> float:
    """R_k(Sigma) = (sum_{i>k} lambda_i)^2 / sum_{i>k} lambda_i^2."""
    sq = spectrum.tail_sum_sq(k)
    if sq <= 0.0:
        raise DivisionGuardError(f"R_{k} undefined for {spectrum!r}: the tail beyond index {k} is empty")
    return spectrum.tail_sum(k) ** 2 / sq


def k0_dim(spectrum: Spectrum, n: int, c0: float = 1.0) -> int:
    return _first_index(spectrum, n, lambda ls, lam, tails: lam <= c0 * tails / n)


def k1_dim(spectrum: Spectrum, n: int, c1: float = 1.0) -> int:
    threshold = c1 * spectrum.total / n
    return _first_index(spectrum, n, lambda ls, lam, tails: lam <= threshold)


def effective_dims(spectrum: Spectrum, n: int, c0: float = 1.0, c1: float = 1.0) -> EffectiveDims:
    if n < 1 or c0 <= 0 or c1 <= 0:
        raise ConfigError(f"effective_dims needs n >= 1 and positive constants, got n={n}, c0={c0}, c1={c1}")
    return EffectiveDims(k0=k0_dim(spectrum, n, c0), k1=k1_dim(spectrum, n, c1),
                         r_sigma=effective_rank(spectrum), n=n, c0=c0, c1=c1, spectrum=spectrum)


def k2_scan(spectrum: Spectrum, n: int, c2: float, c_tn: float):
    """(k2, saturated): saturated means only the empty tail l = p met the threshold."""
    if c2 <= 0 or c_tn <= 0:
        raise ConfigError(f"k2 needs positive c2 and c(t,n), got c2={c2}, c(t,n)={c_tn}")
    # c2 and c(t,n) enter only through their product.
    threshold = c2 * c_tn * spectrum.total
    k2 = _first_index(spectrum, n, lambda ls, lam, tails: tails + n * lam <= threshold)
    saturated = spectrum.p is not None and k2 == spectrum.p
    if saturated:
        log.warning(f"k2 scan saturated at p={spectrum.p} for {spectrum!r} (c2*c(t,n)={c2 * c_tn:.3e})")
    return k2, saturated


def k2_dim(spectrum: Spectrum, n: int, c2: float = 1.0, c_tn: float = 1.0) -> int:
    """min l with sum_{i>l} lambda_i + n lambda_{l+1} <= c2 c(t,n) sum_i lambda_i."""
    return k2_scan(spectrum, n, c2, c_tn)[0]


SpectrumSource = Union[Mapping, Callable[[int], Spectrum]]


def _spectrum_for(family: SpectrumSource, n: int, p: Optional[int]) -> Spectrum:
    if callable(family):
        return family(n)
    return make_spectrum(family, n=n, p=p)


@dataclass(frozen=True)
class RateRow:
    n: int
    k0: int
    k1: int
    r_sigma: float


@dataclass(frozen=True)
class RateTable:
    rows: List[RateRow]
    k0_order: Optional[float]
    k1_order: Optional[float]

    @property
    def insufficient_points(self) -> bool:
        return len(self.rows) < 2


def _check_grid(n_grid: Sequence[int]):
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigError(f"n_grid must be strictly increasing, got {list(n_grid)}")
    if any(n < 1 for n in n_grid):
        raise ConfigError(f"n_grid entries must be positive, got {list(n_grid)}")


def rate_table(family: SpectrumSource, n_grid: Sequence[int], p: Optional[int] = None,
               c0: float = 1.0, c1: float = 1.0) -> RateTable:
    """Effective dimensions along a grid of sample sizes, with fitted log-log orders.

    Orders are None when fewer than two grid points carry a positive value.
    """
    _check_grid(n_grid)
    rows = []
    for n in n_grid:
        dims = effective_dims(_spectrum_for(family, n, p), n, c0, c1)
        rows.append(RateRow(n=n, k0=dims.k0, k1=dims.k1, r_sigma=dims.r_sigma))
        log.debug(f"rate_table n={n}: k0={dims.k0} k1={dims.k1} r={dims.r_sigma:.4g}")
    ns = [row.n for row in rows]
    return RateTable(rows=rows,
                     k0_order=loglog_slope(ns, [row.k0 for row in rows]),
                     k1_order=loglog_slope(ns, [row.k1 for row in rows]))


@dataclass(frozen=True)
class RegimeReport:
    """Finite-grid evidence for the benign and compatible conditions.

    Slopes are log-log slopes against n of k0/n, k1/n, r/n and n/R_{k0}; None means
    the series was identically zero (the corresponding o(n) condition holds trivially).
    """
    n_grid: List[int]
    k0: List[int]
    k1: List[int]
    r_sigma: List[float]
    R_k0: List[float]
    k0_ratio_slope: Optional[float]
    k1_ratio_slope: Optional[float]
    r_ratio_slope: Optional[float]
    n_over_R_slope: Optional[float]
    benign: bool
    compatible: bool


def regime_report(family: SpectrumSource, n_grid: Sequence[int], p: Optional[int] = None,
                  c0: float = 1.0, c1: float = 1.0, tol: float = 0.1) -> RegimeReport:
    _check_grid(n_grid)
    if len(n_grid) < 2:
        raise ConfigError("regime_report needs at least two sample sizes")
    k0s, k1s, rs, Rs = [], [], [], []
    for n in n_grid:
        spectrum = _spectrum_for(family, n, p)
        dims = effective_dims(spectrum, n, c0, c1)
        k0s.append(dims.k0)
        k1s.append(dims.k1)
        rs.append(dims.r_sigma)
        Rs.append(effective_rank_R(spectrum, dims.k0))
    ns = list(n_grid)

    def ratio_slope(values):
        return loglog_slope(ns, [v / n for v, n in zip(values, ns)])

    s_k0, s_k1, s_r = ratio_slope(k0s), ratio_slope(k1s), ratio_slope(rs)
    s_R = loglog_slope(ns, [n / R for n, R in zip(ns, Rs)])

    def little_o(slope):
        return slope is None or slope < -tol

    def big_o(slope):
        return slope is None or slope <= tol

    benign = little_o(s_k0) and s_R is not None and s_R < -tol and little_o(s_r)
    compatible = big_o(s_k0) and little_o(s_k1) and little_o(s_r)
    return RegimeReport(n_grid=ns, k0=k0s, k1=k1s, r_sigma=rs, R_k0=Rs, k0_ratio_slope=s_k0,
                        k1_ratio_slope=s_k1, r_ratio_slope=s_r, n_over_R_slope=s_R,
                        benign=benign, compatible=compatible)


def spectrum_vector(spectrum: Spectrum, p: int) -> torch.Tensor:
    """Eigenvalues as a 1 x p row, ready to scale feature columns."""
    return rearrange(spectrum.vector(p), 'p -> 1 p')
