"""Repeated-trial experiments over one problem instance, and the per-spectrum result tables.

Trial i samples with seed derive_seed(master_seed, i). Trials run on a thread pool with
torch pinned to one intra-op thread, and statistics are folded in trial-index order, so
the result is the same for every pool size.
"""

import io
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from rich.console import Console
from rich.table import Table

from compat_lab.errors import ConfigError, ExperimentAbortedError, NumericalError, RankDeficientSampleError
from compat_lab.instance import ProblemInstance, sample_dataset
from compat_lab.metrics import MeanConfidenceInterval
from compat_lab.spectrum import k1_dim, k1_order_tag, spectrum_formula, spectrum_label
from compat_lab.trajectory import RiskTrajectory, TrajectoryConfig, risk_trajectory
from compat_lab.utils.io import result_path, write_csv, write_json
from compat_lab.utils.seeding import derive_seed
from compat_lab.utils.utils import get_logger

log = get_logger(__name__)

QUANTITIES = ("optimal_risk", "min_norm_risk", "argmin_t", "full_curve")
SCALAR_QUANTITIES = ("optimal_risk", "min_norm_risk", "argmin_t")


@dataclass(frozen=True)
class ExperimentPlan:
    instance: ProblemInstance
    trajectory: TrajectoryConfig
    trials: int = 1000
    master_seed: int = 0
    quantities: Tuple[str, ...] = ("optimal_risk", "min_norm_risk", "argmin_t")
    ci_method: str = "normal"
    spectrum_cfg: Mapping = field(default_factory=dict, compare=False)
    experiment_name: str = "default"

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if not self.quantities:
            raise ConfigError("quantities must not be empty")
        unknown = [q for q in self.quantities if q not in QUANTITIES]
        if unknown:
            raise ConfigError(f"unknown quantities {unknown}; valid quantities: {', '.join(QUANTITIES)}")

    @property
    def label(self) -> str:
        return spectrum_label(self.spectrum_cfg) if self.spectrum_cfg else type(self.instance.spectrum).__name__

    def seed(self, index: int) -> int:
        return derive_seed(self.master_seed, index)


@dataclass(frozen=True)
class QuantityStat:
    mean: float
    half_width: float
    count: int

    def __str__(self):
        return f"{self.mean:.4g} ± {self.half_width:.2g}"


@dataclass(frozen=True)
class ExperimentResult:
    label: str
    n: int
    p: int
    trials: int
    master_seed: int
    stats: Dict[str, QuantityStat]
    t_grid: Tuple[int, ...] = ()
    curve_mean: Optional[torch.Tensor] = field(default=None, repr=False)
    curve_half_width: Optional[torch.Tensor] = field(default=None, repr=False)
    learning_rate: Optional[float] = None

    def __getitem__(self, quantity: str) -> QuantityStat:
        return self.stats[quantity]

    @property
    def mean_trajectory(self) -> RiskTrajectory:
        """The trial-averaged risk curve, usable by `region_scan`."""
        if self.curve_mean is None:
            raise ConfigError("experiment did not record the full curve")
        mn = self.stats.get("min_norm_risk")
        return RiskTrajectory(t_grid=self.t_grid, risk=self.curve_mean,
                              min_norm_risk=mn.mean if mn is not None else float("nan"),
                              learning_rate=self.learning_rate, n=self.n)

    def curve_rows(self) -> List[Dict[str, float]]:
        return [{"t": t, "risk": self.curve_mean[i].item(), "risk_ci": self.curve_half_width[i].item()}
                for i, t in enumerate(self.t_grid)]

    def to_dict(self) -> Dict:
        out = {"label": self.label, "n": self.n, "p": self.p, "trials": self.trials,
               "master_seed": self.master_seed, "learning_rate": self.learning_rate,
               "stats": {k: {"mean": v.mean, "half_width": v.half_width, "count": v.count}
                         for k, v in self.stats.items()}}
        if self.curve_mean is not None:
            out["curve"] = self.curve_rows()
        return out


@dataclass(frozen=True)
class TrialOutcome:
    index: int
    seed: int
    trajectory: RiskTrajectory


@contextmanager
def single_threaded_torch():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def run_trial(plan: ExperimentPlan, index: int) -> TrialOutcome:
    seed = plan.seed(index)
    ds = sample_dataset(plan.instance, seed)
    traj = risk_trajectory(ds, plan.instance.spectrum, plan.instance.theta_star, plan.trajectory)
    return TrialOutcome(index=index, seed=seed, trajectory=traj)


def _trial_or_error(plan: ExperimentPlan, index: int):
    try:
        return run_trial(plan, index)
    except NumericalError as e:
        return index, plan.seed(index), e


def run_experiment(plan: ExperimentPlan, threads: int = 1) -> ExperimentResult:
    """Run all trials and aggregate mean and 95% half-width per quantity.

    Any failing trial aborts the experiment with every failing seed listed.
    """
    if threads < 1:
        raise ConfigError(f"threads must be positive, got {threads}")
    log.info(f"Running {plan.trials} trial(s) of {plan.label} (n={plan.instance.n}, p={plan.instance.p}) "
             f"on {threads} worker(s)")
    with single_threaded_torch():
        if threads == 1:
            outcomes = [_trial_or_error(plan, i) for i in range(plan.trials)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(lambda i: _trial_or_error(plan, i), range(plan.trials)))

    failures = [o for o in outcomes if isinstance(o, tuple)]
    if failures:
        seeds = [seed for _, seed, _ in failures]
        causes = {type(e) for _, _, e in failures}
        cause = failures[0][2]
        if causes == {RankDeficientSampleError}:
            cause = RankDeficientSampleError(seeds)
        raise ExperimentAbortedError(seeds, cause)

    grid = plan.trajectory.t_grid
    meters = {q: MeanConfidenceInterval(method=plan.ci_method, seed=plan.seed(plan.trials))
              for q in plan.quantities if q in SCALAR_QUANTITIES}
    curve = (MeanConfidenceInterval(shape=(len(grid),), method=plan.ci_method, seed=plan.seed(plan.trials))
             if "full_curve" in plan.quantities else None)
    for outcome in outcomes:
        traj = outcome.trajectory
        values = {"optimal_risk": traj.optimal_risk, "min_norm_risk": traj.min_norm_risk,
                  "argmin_t": float(traj.argmin_t)}
        for q, meter in meters.items():
            meter.update(values[q])
        if curve is not None:
            curve.update(traj.risk)

    stats = {}
    for q, meter in meters.items():
        mean, hw = meter.compute()
        stats[q] = QuantityStat(mean=mean.item(), half_width=hw.item(), count=plan.trials)
    curve_mean = curve_hw = None
    if curve is not None:
        curve_mean, curve_hw = curve.compute()
    return ExperimentResult(label=plan.label, n=plan.instance.n, p=plan.instance.p, trials=plan.trials,
                            master_seed=plan.master_seed, stats=stats, t_grid=tuple(grid),
                            curve_mean=curve_mean, curve_half_width=curve_hw,
                            learning_rate=plan.trajectory.learning_rate)


def save_result(result: ExperimentResult, output_dir, experiment_name: str) -> Dict[str, Path]:
    """{label}_n{n}_p{p}.csv holds the mean curve when recorded (else the scalar statistics),
    {label}_n{n}_p{p}_stats.csv the statistics and the .json file everything."""
    paths = {}
    base = result_path(output_dir, experiment_name, result.label, result.n, result.p)
    rows = [{"quantity": q, "mean": s.mean, "half_width": s.half_width, "trials": s.count}
            for q, s in result.stats.items()]
    stats_columns = ["quantity", "mean", "half_width", "trials"]
    if result.curve_mean is not None:
        paths["curve"] = write_csv(base, result.curve_rows(), columns=["t", "risk", "risk_ci"])
        paths["stats"] = write_csv(base.with_name(base.stem + "_stats.csv"), rows, columns=stats_columns)
    else:
        paths["stats"] = write_csv(base, rows, columns=stats_columns)
    paths["json"] = write_json(base.with_suffix(".json"), result.to_dict())
    return paths


TABLE_COLUMNS = ["spectrum", "formula", "k1", "k1_order", "optimal_risk", "optimal_risk_ci",
                 "min_norm_risk", "min_norm_risk_ci"]


@dataclass(frozen=True)
class TableRow:
    label: str
    formula: str
    k1: int
    k1_order: str
    optimal: QuantityStat
    min_norm: QuantityStat

    def to_dict(self) -> Dict:
        return {"spectrum": self.label, "formula": self.formula, "k1": self.k1, "k1_order": self.k1_order,
                "optimal_risk": self.optimal.mean, "optimal_risk_ci": self.optimal.half_width,
                "min_norm_risk": self.min_norm.mean, "min_norm_risk_ci": self.min_norm.half_width}


@dataclass(frozen=True)
class TableReport:
    rows: List[TableRow]
    n: Optional[int] = None
    p: Optional[int] = None

    def to_rows(self) -> List[Dict]:
        return [row.to_dict() for row in self.rows]

    def rich_table(self) -> Table:
        title = "Excess risk" if self.n is None else f"Excess risk, n={self.n}, p={self.p}"
        table = Table(title=title)
        for name, justify in (("Spectrum", "left"), ("k1", "right"), ("Order", "left"),
                              ("Optimal early stopping", "right"), ("Min-norm", "right")):
            table.add_column(name, justify=justify)
        for row in self.rows:
            table.add_row(row.formula, str(row.k1), row.k1_order, str(row.optimal), str(row.min_norm))
        return table

    def render(self) -> str:
        console = Console(file=io.StringIO(), width=120, color_system=None)
        console.print(self.rich_table())
        return console.file.getvalue()

    def save_csv(self, path) -> Path:
        return write_csv(path, self.to_rows(), columns=TABLE_COLUMNS)


def table_report(plans: Sequence[ExperimentPlan], threads: int = 1,
                 results: Optional[List[ExperimentResult]] = None) -> TableReport:
    """One row per spectrum, in plan order. Plans must share n and p."""
    if not plans:
        return TableReport(rows=[])
    ns = {plan.instance.n for plan in plans}
    ps = {plan.instance.p for plan in plans}
    if len(ns) > 1 or len(ps) > 1:
        raise ConfigError(f"table plans must share n and p, got n in {sorted(ns)}, p in {sorted(ps)}")
    for plan in plans:
        missing = {"optimal_risk", "min_norm_risk"} - set(plan.quantities)
        if missing:
            raise ConfigError(f"table plans must record {sorted(missing)}")
    if results is None:
        results = [run_experiment(plan, threads=threads) for plan in plans]
    rows = []
    for plan, res in zip(plans, results):
        n = plan.instance.n
        cfg = plan.spectrum_cfg
        rows.append(TableRow(label=plan.label, formula=spectrum_formula(cfg) if cfg else plan.label,
                             k1=k1_dim(plan.instance.spectrum, n), k1_order=k1_order_tag(cfg) if cfg else "-",
                             optimal=res["optimal_risk"], min_norm=res["min_norm_risk"]))
    return TableReport(rows=rows, n=ns.pop(), p=ps.pop())
