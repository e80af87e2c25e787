import pandas as pd
import pytest
import torch

from compat_lab.errors import ConfigError, ExperimentAbortedError, StabilityError
from compat_lab.instance import build_instance
from compat_lab.montecarlo import ExperimentPlan, run_experiment, save_result, table_report
from compat_lab.trajectory import TrajectoryConfig
from compat_lab.utils.seeding import derive_seed


def make_plan(spectrum_cfg, n=20, p=60, trials=6, quantities=('optimal_risk', 'min_norm_risk', 'argmin_t'),
              learning_rate=None, ci_method='normal', master_seed=0):
    inst = build_instance(spectrum_cfg, {'n': n, 'p': p})
    traj = TrajectoryConfig.from_config({'points_per_decade': 10}, inst.spectrum, n)
    if learning_rate is not None:
        traj = TrajectoryConfig(learning_rate=learning_rate, t_grid=traj.t_grid)
    return ExperimentPlan(instance=inst, trajectory=traj, trials=trials, master_seed=master_seed,
                          quantities=tuple(quantities), ci_method=ci_method, spectrum_cfg=spectrum_cfg)


POLY2 = {'family': 'inv_poly', 'alpha': 2}


def test_trial_seeds():
    plan = make_plan(POLY2, master_seed=123)
    assert plan.seed(4) == derive_seed(123, 4)
    assert len({plan.seed(i) for i in range(100)}) == 100


@pytest.mark.parametrize('threads', [2, 3])
@pytest.mark.parametrize('ci_method', ['normal', 'bootstrap'])
def test_results_do_not_depend_on_threads(threads, ci_method):
    plan = make_plan(POLY2, quantities=('optimal_risk', 'min_norm_risk', 'argmin_t', 'full_curve'),
                     ci_method=ci_method)
    serial = run_experiment(plan, threads=1)
    pooled = run_experiment(plan, threads=threads)
    assert serial.stats == pooled.stats
    assert torch.equal(serial.curve_mean, pooled.curve_mean)
    assert torch.equal(serial.curve_half_width, pooled.curve_half_width)


def test_repeated_runs_are_identical():
    plan = make_plan(POLY2)
    assert run_experiment(plan).stats == run_experiment(plan).stats


def test_interval_shrinks_with_trials():
    small = run_experiment(make_plan(POLY2, trials=10))
    large = run_experiment(make_plan(POLY2, trials=160))
    assert large['optimal_risk'].half_width < 0.5 * small['optimal_risk'].half_width
    assert large['optimal_risk'].count == 160


def test_min_norm_much_worse_than_early_stopping():
    result = run_experiment(make_plan(POLY2, n=100, p=1000, trials=20), threads=2)
    assert result['min_norm_risk'].mean >= 10 * result['optimal_risk'].mean


def test_failing_trials_abort_with_seeds():
    plan = make_plan(POLY2, trials=3, learning_rate=50.0)
    with pytest.raises(ExperimentAbortedError) as exc_info:
        run_experiment(plan)
    assert exc_info.value.seeds == [plan.seed(i) for i in range(3)]
    assert isinstance(exc_info.value.cause, StabilityError)


def test_plan_validation():
    with pytest.raises(ConfigError):
        make_plan(POLY2, trials=0)
    with pytest.raises(ConfigError):
        make_plan(POLY2, quantities=('median_risk',))
    with pytest.raises(ConfigError):
        run_experiment(make_plan(POLY2), threads=0)


def test_mean_trajectory_requires_curve():
    result = run_experiment(make_plan(POLY2, trials=2))
    with pytest.raises(ConfigError):
        result.mean_trajectory
    result = run_experiment(make_plan(POLY2, trials=2, quantities=('min_norm_risk', 'full_curve')))
    traj = result.mean_trajectory
    assert traj.t_grid == result.t_grid and traj.risk.shape == (len(result.t_grid),)


def test_save_result(tmp_path):
    result = run_experiment(make_plan(POLY2, trials=3, quantities=('optimal_risk', 'full_curve')))
    paths = save_result(result, tmp_path, 'unit')
    assert paths['curve'] == tmp_path / 'unit' / 'inv_poly_a2_n20_p60.csv'
    curve = pd.read_csv(paths['curve'])
    assert list(curve.columns) == ['t', 'risk', 'risk_ci']
    assert len(curve) == len(result.t_grid)
    stats = pd.read_csv(paths['stats'])
    assert list(stats['quantity']) == ['optimal_risk']
    assert paths['json'].exists()

    result = run_experiment(make_plan(POLY2, trials=3))
    paths = save_result(result, tmp_path, 'unit')
    assert paths['stats'] == tmp_path / 'unit' / 'inv_poly_a2_n20_p60.csv'


def test_optimal_risk_decreases_with_decay():
    plans = [make_plan({'family': 'inv_poly', 'alpha': a}, n=100, p=1000, trials=10,
                       quantities=('optimal_risk', 'min_norm_risk')) for a in (1, 2, 3)]
    report = table_report(plans, threads=2)
    means = [row.optimal.mean for row in report.rows]
    assert means[0] > means[1] > means[2]
    assert [row.formula for row in report.rows] == ['1/i', '1/i^2', '1/i^3']
    assert report.rows[1].k1 == 7
    text = report.render()
    assert 'n=100, p=1000' in text and '1/i^3' in text


def test_optimal_risk_decreases_with_log_power():
    plans = [make_plan({'family': 'inv_log_poly', 'beta': b}, n=100, p=1000, trials=40,
                       quantities=('optimal_risk', 'min_norm_risk')) for b in (1, 2, 3)]
    means = [row.optimal.mean for row in table_report(plans, threads=2).rows]
    assert means[0] > means[1] > means[2]


def test_noiseless_risk_vanishes():
    risks = []
    for n in (20, 80):
        inst = build_instance(POLY2, {'n': n, 'p': 10 * n, 'noise_sigma': 0.0})
        traj = TrajectoryConfig.from_config({'points_per_decade': 10}, inst.spectrum, n)
        plan = ExperimentPlan(instance=inst, trajectory=traj, trials=4, master_seed=0,
                              quantities=('optimal_risk',), spectrum_cfg=POLY2)
        risks.append(run_experiment(plan)['optimal_risk'].mean)
    assert risks[0] > risks[1]
    assert risks[1] < 2e-2


def test_table_report_edge_cases(tmp_path):
    assert table_report([]).rows == []
    with pytest.raises(ConfigError):
        table_report([make_plan(POLY2, n=20), make_plan(POLY2, n=30)])
    with pytest.raises(ConfigError):
        table_report([make_plan(POLY2, quantities=('argmin_t',))])
    report = table_report([make_plan(POLY2, trials=2, quantities=('optimal_risk', 'min_norm_risk'))])
    path = report.save_csv(tmp_path / 'table.csv')
    assert pd.read_csv(path).shape == (1, 8)
