import math
from pathlib import Path
from typing import Callable, Dict, List, Optional

import rich
import torch
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException
from rich.table import Table

from compat_lab.bounds import (BoundEvaluator, CtnStrategy, bound_report, min_bound_over_t, optimal_epoch_slope,
                               power_law_exponents, power_law_scan, rate_comparison)
from compat_lab.errors import ConfigError, DivisionGuardError, NumericalError
from compat_lab.instance import build_instance, sample_dataset
from compat_lab.montecarlo import ExperimentPlan, run_experiment, save_result, table_report
from compat_lab.spectrum import k1_order_tag, make_spectrum, rate_table, regime_report, spectrum_label
from compat_lab.trajectory import TrajectoryConfig, region_scan, risk_trajectory, stable_learning_rate
from compat_lab.utils import utils
from compat_lab.utils.io import result_path, write_csv, write_json
from compat_lab.verify import VerifyConfig, run_checks

log = utils.get_logger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


def _container(section) -> Dict:
    return OmegaConf.to_container(section, resolve=True) if isinstance(section, DictConfig) else dict(section)


def _out_dir(config: DictConfig) -> Path:
    return Path(config.output_dir) / config.experiment_name


def _plan(config: DictConfig, spectrum_cfg: Dict, quantities, n: Optional[int] = None) -> ExperimentPlan:
    instance_cfg = _container(config.instance)
    if n is not None:
        instance_cfg["n"] = n
    inst = build_instance(spectrum_cfg, instance_cfg)
    traj_cfg = TrajectoryConfig.from_config(config.trajectory, inst.spectrum, inst.n)
    return ExperimentPlan(instance=inst, trajectory=traj_cfg, trials=_get(config, "trials", int),
                          master_seed=_get(config, "seed", int), quantities=tuple(quantities),
                          ci_method=config.get("ci_method", "normal"), spectrum_cfg=spectrum_cfg,
                          experiment_name=config.experiment_name)


def _print_table(title: str, columns: List[str], rows: List[Dict]) -> None:
    table = Table(title=title)
    for col in columns:
        table.add_column(col)
    for row in rows:
        table.add_row(*[_fmt(row.get(col)) for col in columns])
    rich.print(table)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def cmd_spectrum(config: DictConfig) -> int:
    """Effective dimensions along config.n_grid, with fitted orders and the benign/compatible labels."""
    spectrum_cfg = _container(config.spectrum)
    n_grid = list(utils.config_list(config, "n_grid", int))
    table = rate_table(spectrum_cfg, n_grid, p=spectrum_cfg.get("p"))
    if table.insufficient_points:
        log.warning(f"{len(n_grid)} sample size(s): not enough points to fit an order")
    rows = [{"n": r.n, "k0": r.k0, "k1": r.k1, "r_sigma": r.r_sigma, "k0_order": table.k0_order,
             "k1_order": table.k1_order} for r in table.rows]
    label = spectrum_label(spectrum_cfg)
    out = _out_dir(config)
    columns = ["n", "k0", "k1", "r_sigma", "k0_order", "k1_order"]
    write_csv(out / f"{label}_rates.csv", rows, columns=columns)

    summary = {"spectrum": spectrum_cfg, "k0_order": table.k0_order, "k1_order": table.k1_order,
               "k1_order_expected": k1_order_tag(spectrum_cfg), "insufficient_points": table.insufficient_points}
    if not table.insufficient_points:
        try:
            regime = regime_report(spectrum_cfg, n_grid, p=spectrum_cfg.get("p"))
            summary["regime"] = {"benign": regime.benign, "compatible": regime.compatible,
                                 "k0_ratio_slope": regime.k0_ratio_slope, "k1_ratio_slope": regime.k1_ratio_slope,
                                 "r_ratio_slope": regime.r_ratio_slope, "n_over_R_slope": regime.n_over_R_slope}
            log.info(f"{label}: benign={regime.benign} compatible={regime.compatible}")
        except DivisionGuardError as e:
            log.warning(f"regime report skipped: {e}")
    write_json(out / f"{label}_rates.json", summary)
    _print_table(f"Effective dimensions, {label}", columns, rows)
    return EXIT_OK


def cmd_trajectory(config: DictConfig) -> int:
    """Trial-averaged risk curve with CI on the epoch grid, plus optimal / min-norm statistics."""
    spectrum_cfg = _container(config.spectrum)
    quantities = list(config.quantities)
    if "full_curve" not in quantities:
        quantities.append("full_curve")
    plan = _plan(config, spectrum_cfg, quantities)
    result = run_experiment(plan, threads=utils.resolve_threads(config.threads))
    paths = save_result(result, config.output_dir, config.experiment_name)

    if plan.trials == 1 and config.trajectory.get("decompose", False):
        inst = plan.instance
        ds = sample_dataset(inst, plan.seed(0))
        traj = risk_trajectory(ds, inst.spectrum, inst.theta_star, plan.trajectory, decompose=True)
        base = paths["curve"]
        write_csv(base.with_name(base.stem + "_decomposition.csv"), traj.rows(),
                  columns=["t", "risk", "bias_part", "variance_part", "param_norm"])

    for q, stat in result.stats.items():
        log.info(f"{result.label} {q}: {stat}")
    log.info(f"Wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def _get(config: DictConfig, path: str, kind: Callable = float, **kwargs):
    """Config value at a dotted path, coerced with `kind`; bad or missing values raise ConfigError."""
    section, _, key = path.rpartition(".")
    return utils.config_value(OmegaConf.select(config, section) if section else config, key, kind,
                              section=section, **kwargs)


def _bound_context(config: DictConfig):
    """Spectrum section, n grid and the coerced `bounds` parameters shared by every bound analysis."""
    spectrum_cfg = _container(config.spectrum)
    noise_sigma = _get(config, "instance.noise_sigma", default=1.0)
    theta_norm = _get(config, "instance.theta_norm", default=1.0)
    params = dict(
        n=_get(config, "instance.n", int),
        sigma_y=_get(config, "bounds.sigma_y", default=noise_sigma),
        theta_norm=_get(config, "bounds.theta_norm", default=theta_norm),
        delta=_get(config, "bounds.delta"),
        ctn=CtnStrategy.from_config(config.bounds.ctn),
        c0=_get(config, "bounds.c0", default=1.0),
        c1=_get(config, "bounds.c1", default=1.0),
        c2=_get(config, "bounds.c2", default=2.0),
        multiplier_B=_get(config, "bounds.multiplier_B", default=1.0),
        multiplier_V=_get(config, "bounds.multiplier_V", default=1.0),
        points_per_decade=_get(config, "bounds.points_per_decade", int, default=20),
        learning_rate=_get(config, "bounds.learning_rate", default=None),
    )
    return spectrum_cfg, params


def _fixed_learning_rate(spectrum_cfg: Dict, params: Dict, n_grid: List[int]) -> float:
    lr = params["learning_rate"]
    return stable_learning_rate(make_spectrum(spectrum_cfg, n=n_grid[0])) if lr is None else lr


def _report_bounds(config: DictConfig, out: Path) -> None:
    spectrum_cfg, bp = _bound_context(config)
    n = bp["n"]
    spectrum = make_spectrum(spectrum_cfg, n=n)
    traj_cfg = TrajectoryConfig.from_config(config.trajectory, spectrum, n)
    lr = traj_cfg.learning_rate
    report = bound_report(spectrum, n, lr, traj_cfg.t_grid, theta_norm=bp["theta_norm"], sigma_y=bp["sigma_y"],
                          delta=bp["delta"], ctn=bp["ctn"], c0=bp["c0"], c1=bp["c1"], c2=bp["c2"],
                          multiplier_B=bp["multiplier_B"], multiplier_V=bp["multiplier_V"])
    ev = BoundEvaluator(spectrum, n, lr, bp["theta_norm"], bp["sigma_y"], bp["delta"], bp["ctn"], bp["c1"],
                        bp["c2"], bp["multiplier_B"], bp["multiplier_V"])
    best = min_bound_over_t(ev, traj_cfg.t_grid, spectrum=spectrum, n=n, c1=bp["c1"])
    base = result_path(out.parent, out.name, spectrum_label(spectrum_cfg), n, spectrum.p)
    write_csv(base.with_name(base.stem + "_bounds.csv"), report.rows(),
              columns=["t", "B_t", "V_t", "B_t+V_t", "k2_t"])
    summary = report.summary()
    summary.update({"t_star": best.t_star, "min_bound": best.value, "target": best.target})
    write_json(base.with_name(base.stem + "_bounds.json"), summary)
    log.info(f"min_t(B+V) = {best.value:.4g} at t = {best.t_star}; target {best.target:.4g}; "
             f"k0={report.k0} k1={report.k1} bartlett={report.bartlett_bound:.4g} zou={report.zou_bound:.4g}")


def _compare_rates(config: DictConfig, out: Path) -> None:
    _, bp = _bound_context(config)
    families = {label: _container(cfg) for label, cfg in config.bounds.comparison_families.items()}
    rows = rate_comparison(families, list(utils.config_list(config, "n_grid", int)), lr=bp["learning_rate"],
                           theta_norm=bp["theta_norm"], sigma_y=bp["sigma_y"], delta=bp["delta"], ctn=bp["ctn"],
                           c0=bp["c0"], c1=bp["c1"], c2=bp["c2"], points_per_decade=bp["points_per_decade"])
    columns = ["label", "min_bound_slope", "bartlett_slope", "zou_slope", "t_star_slope"]
    flat = [{k: r.to_dict()[k] for k in columns} for r in rows]
    write_csv(out / "comparison.csv", flat, columns=columns)
    write_json(out / "comparison.json", {"rows": [r.to_dict() for r in rows]})
    _print_table("Fitted rates against n", columns, flat)


def _optimal_epoch(config: DictConfig, out: Path) -> None:
    spectrum_cfg, bp = _bound_context(config)
    n_grid = list(utils.config_list(config, "n_grid", int))
    lr = _fixed_learning_rate(spectrum_cfg, bp, n_grid)
    slope, results = optimal_epoch_slope(spectrum_cfg, n_grid, lr, p=spectrum_cfg.get("p"),
                                         theta_norm=bp["theta_norm"], sigma_y=bp["sigma_y"], delta=bp["delta"],
                                         ctn=bp["ctn"], c1=bp["c1"], c2=bp["c2"],
                                         points_per_decade=bp["points_per_decade"])
    rows = []
    for n, res in zip(n_grid, results):
        spectrum = make_spectrum(spectrum_cfg, n=n)
        ev = BoundEvaluator(spectrum, n, lr, bp["theta_norm"], bp["sigma_y"], bp["delta"], bp["ctn"], bp["c1"],
                            bp["c2"])
        at_sqrt_n = ev(max(1, round(math.sqrt(n) / lr)))
        rows.append({"n": n, "t_star": res.t_star, "min_bound": res.value, "target": res.target,
                     "bound_at_sqrt_n": at_sqrt_n, "sqrt_n_ratio": at_sqrt_n / res.value})
    columns = ["n", "t_star", "min_bound", "target", "bound_at_sqrt_n", "sqrt_n_ratio"]
    label = spectrum_label(spectrum_cfg)
    write_csv(out / f"{label}_optimal_epoch.csv", rows, columns=columns)
    write_json(out / f"{label}_optimal_epoch.json", {"t_star_slope": slope, "learning_rate": lr, "rows": rows})
    log.info(f"bound-minimising epoch grows like n^{slope:.3f}" if slope is not None else "no slope fitted")
    _print_table(f"Bound-minimising epoch, {label}", columns, rows)


def _power_law(config: DictConfig, out: Path) -> None:
    spectrum_cfg, bp = _bound_context(config)
    n_grid = list(utils.config_list(config, "n_grid", int))
    tau = _get(config, "bounds.power_law.tau")
    betas = torch.linspace(_get(config, "bounds.power_law.beta_min"), _get(config, "bounds.power_law.beta_max"),
                           _get(config, "bounds.power_law.beta_steps", int), dtype=torch.float64).tolist()
    lr = _fixed_learning_rate(spectrum_cfg, bp, n_grid)
    slope, rows = power_law_scan(spectrum_cfg, n_grid, lr, tau, betas, p=spectrum_cfg.get("p"), delta=bp["delta"],
                                 sigma_y=bp["sigma_y"], c1=bp["c1"], c2=bp["c2"])
    summary = {"tau": tau, "V_slope": slope, "rows": rows}
    if spectrum_cfg.get("family") == "inv_poly":
        beta, exponent = power_law_exponents(_get(config, "spectrum.alpha"), tau)
        summary.update({"balancing_beta": beta, "expected_exponent": exponent})
    label = spectrum_label(spectrum_cfg)
    write_csv(out / f"{label}_power_law.csv", rows, columns=["n", "t", "beta_star", "V_star"])
    write_json(out / f"{label}_power_law.json", summary)
    _print_table(f"Power-law c(t,n), {label}", ["n", "t", "beta_star", "V_star"], rows)


BOUND_ANALYSES: Dict[str, Callable[[DictConfig, Path], None]] = {
    "report": _report_bounds,
    "comparison": _compare_rates,
    "optimal_epoch": _optimal_epoch,
    "power_law": _power_law,
}


def cmd_bounds(config: DictConfig) -> int:
    analyses = list(config.bounds.analyses)
    unknown = [a for a in analyses if a not in BOUND_ANALYSES]
    if unknown:
        raise ConfigError(f"unknown bound analyses {unknown}; valid analyses: {', '.join(BOUND_ANALYSES)}")
    out = _out_dir(config)
    for name in analyses:
        log.info(f"Running bound analysis <{name}>")
        BOUND_ANALYSES[name](config, out)
    return EXIT_OK


def cmd_table(config: DictConfig) -> int:
    """Optimal early-stopping and min-norm risk per spectrum at a shared (n, p)."""
    p = config.instance.get("p")
    plans = []
    for spec in config.table.spectra:
        spectrum_cfg = _container(spec)
        spectrum_cfg.setdefault("p", p)
        plans.append(_plan(config, spectrum_cfg, ["optimal_risk", "min_norm_risk"]))
    results = [run_experiment(plan, threads=utils.resolve_threads(config.threads)) for plan in plans]
    for res in results:
        save_result(res, config.output_dir, config.experiment_name)
    report = table_report(plans, results=results)
    if not report.rows:
        log.warning("no spectra configured, the table is empty")
    rich.print(report.rich_table())
    n = report.n if report.n is not None else config.instance.get("n")
    p = report.p if report.p is not None else config.instance.get("p")
    out = _out_dir(config)
    report.save_csv(out / f"table_n{n}_p{p}.csv")
    write_json(out / f"table_n{n}_p{p}.json", {"rows": report.to_rows()})
    return EXIT_OK


def cmd_scan(config: DictConfig) -> int:
    """Longest epoch interval with mean risk under scan.threshold, for each n in scan.n_grid."""
    spectrum_cfg = _container(config.spectrum)
    trajectories = {}
    for n in utils.config_list(config.scan, "n_grid", int, section="scan"):
        plan = _plan(config, spectrum_cfg, ["optimal_risk", "min_norm_risk", "full_curve"], n=n)
        result = run_experiment(plan, threads=utils.resolve_threads(config.threads))
        save_result(result, config.output_dir, config.experiment_name)
        trajectories[n] = result.mean_trajectory
    intervals = region_scan(trajectories, _get(config, "scan.threshold"))
    rows = [{"n": iv.n, "threshold": iv.threshold, "empty": iv.empty, "start_t": iv.start_t, "stop_t": iv.stop_t,
             "start_scaled": iv.start_scaled, "stop_scaled": iv.stop_scaled} for iv in intervals]
    columns = ["n", "threshold", "empty", "start_t", "stop_t", "start_scaled", "stop_scaled"]
    out = _out_dir(config)
    write_csv(out / f"{spectrum_label(spectrum_cfg)}_region_scan.csv", rows, columns=columns)
    _print_table("Compatibility region", columns, rows)
    return EXIT_OK


def cmd_verify(config: DictConfig) -> int:
    vcfg = VerifyConfig.from_config(_container(config.verify), seed=_get(config, "seed", int))
    report = run_checks(vcfg)
    rows = [r.to_dict() for r in report.results]
    write_json(_out_dir(config) / "verify_report.json", report.to_dict())
    if not rows:
        log.warning("0 checks run")
        return EXIT_OK
    _print_table("Verification", ["name", "passed", "tolerance", "observed", "runtime_s", "detail"], rows)
    failed = [r.name for r in report.results if not r.passed]
    if failed:
        log.error(f"{len(failed)} of {len(rows)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    log.info(f"all {len(rows)} checks passed")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[DictConfig], int]] = {
    "spectrum": cmd_spectrum,
    "trajectory": cmd_trajectory,
    "bounds": cmd_bounds,
    "table": cmd_table,
    "scan": cmd_scan,
    "verify": cmd_verify,
}


def dispatch(config: DictConfig) -> int:
    """Run config.command and map failures onto exit codes:
    0 success, 1 verification failure, 2 config error, 3 numerical error.
    """
    try:
        utils.extras(config)
        if config.get("print_config"):
            utils.print_config(config, resolve=True, output_dir=_out_dir(config))
        command = config.get("command")
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; valid commands: {', '.join(COMMANDS)}")
        return COMMANDS[command](config)
    except (ConfigError, OmegaConfBaseException) as e:
        log.error(f"configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except NumericalError as e:
        log.error(f"numerical error: {e}")
        return EXIT_NUMERICAL_ERROR
