import math
from typing import Optional, Sequence

import torch
from einops import rearrange


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log y against log x.

    Returns None when fewer than two points are usable (non-positive entries are
    dropped, since their logarithm is undefined).
    """
    pts = [(float(a), float(b)) for a, b in zip(x, y) if a > 0 and b > 0
           and math.isfinite(a) and math.isfinite(b)]
    if len(pts) < 2 or len({a for a, _ in pts}) < 2:
        return None
    logs = torch.tensor(pts, dtype=torch.float64).log()
    design = torch.stack([logs[:, 0], torch.ones_like(logs[:, 0])], dim=1)
    sol = torch.linalg.lstsq(design, rearrange(logs[:, 1], 'k -> k 1')).solution
    return sol[0, 0].item()
