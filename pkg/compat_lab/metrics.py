from typing import Any, Dict, Optional, Sequence, Tuple

import torch
from torch import Tensor
from torchmetrics import Metric

from compat_lab.utils.seeding import make_generator

__all__ = ['MeanConfidenceInterval']

CI_METHODS = ("normal", "bootstrap")
BOOTSTRAP_CHUNK_ELEMENTS = 1 << 22


class MeanConfidenceInterval(Metric):
    r"""
    Running mean of a per-trial quantity with the half-width of its 95% confidence interval.
    Values may be scalars or tensors of a fixed shape (e.g. a risk curve on a shared grid);
    statistics are taken elementwise.
    Args:
        shape: shape of one observation.
        method: "normal" gives z * sd / sqrt(count); "bootstrap" gives half the width of the
            percentile interval of resampled means (observations are kept for it).
        z: normal quantile, 1.96 for 95%.
        num_resamples, seed: bootstrap controls.
    Examples:
        >>> metric = MeanConfidenceInterval()
        >>> for v in (1.0, 2.0, 3.0):
        ...     metric.update(v)
        >>> metric.compute()
        (tensor(2., dtype=torch.float64), tensor(1.1316, dtype=torch.float64))
    """
    is_differentiable = False
    higher_is_better = False
    full_state_update = False
    total: Tensor
    total_sq: Tensor
    count: Tensor

    def __init__(self, shape: Sequence[int] = (), method: str = "normal", z: float = 1.96,
                 num_resamples: int = 1000, seed: int = 0, **kwargs: Dict[str, Any]):
        super().__init__(**kwargs)
        if method not in CI_METHODS:
            raise ValueError(f"unknown CI method {method!r}; valid methods: {', '.join(CI_METHODS)}")
        self.method = method
        self.z = z
        self.num_resamples = num_resamples
        self.seed = seed
        self.add_state("total", default=torch.zeros(tuple(shape), dtype=torch.float64), dist_reduce_fx="sum")
        self.add_state("total_sq", default=torch.zeros(tuple(shape), dtype=torch.float64), dist_reduce_fx="sum")
        self.add_state("count", default=torch.tensor(0, dtype=torch.int64), dist_reduce_fx="sum")
        if method == "bootstrap":
            self.add_state("samples", default=[], dist_reduce_fx="cat")

    def update(self, value) -> None:  # type: ignore
        value = torch.as_tensor(value, dtype=torch.float64)
        self.total += value
        self.total_sq += value * value
        self.count += 1
        if self.method == "bootstrap":
            self.samples.append(value.clone())

    def compute(self) -> Tuple[Tensor, Tensor]:
        """(mean, half-width); the half-width is 0 for a single observation."""
        count = self.count.item()
        mean = self.total / max(count, 1)
        if count < 2:
            return mean, torch.zeros_like(mean)
        if self.method == "bootstrap":
            return mean, self._bootstrap_half_width(count)
        var = ((self.total_sq - count * mean * mean) / (count - 1)).clamp(min=0.0)
        return mean, self.z * var.sqrt() / count ** 0.5

    def _bootstrap_half_width(self, count: int) -> Tensor:
        samples = torch.stack(self.samples) if isinstance(self.samples, list) else self.samples
        idx = torch.randint(0, count, (self.num_resamples, count), generator=make_generator(self.seed))
        # resample in chunks so at most ~BOOTSTRAP_CHUNK_ELEMENTS gathered values are live at once
        per_resample = max(count * samples[0].numel(), 1)
        chunk = max(1, BOOTSTRAP_CHUNK_ELEMENTS // per_resample)
        means = torch.cat([samples[idx[i:i + chunk]].mean(1) for i in range(0, self.num_resamples, chunk)])
        hi = torch.quantile(means, 0.975, dim=0)
        lo = torch.quantile(means, 0.025, dim=0)
        return 0.5 * (hi - lo)
