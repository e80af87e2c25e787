"""Result files: CSV tables through pandas, JSON summaries."""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd
import torch

PathLike = Union[str, Path]


def result_path(output_dir: PathLike, experiment_name: str, spectrum_id: str, n: int, p: Optional[int],
                suffix: str = ".csv") -> Path:
    """{output_dir}/{experiment_name}/{spectrum_id}_n{n}_p{p}{suffix}; p = inf for infinite spectra."""
    p_tag = "inf" if p is None else str(p)
    return Path(output_dir) / experiment_name / f"{spectrum_id}_n{n}_p{p_tag}{suffix}"


def write_csv(path: PathLike, rows: List[Mapping[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """Header row always written; column order is `columns` or the key order of the first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False, float_format="%.17g")
    return path


def _jsonable(obj):
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path: PathLike, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2), encoding="utf-8")
    return path
