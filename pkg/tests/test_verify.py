import math

import pytest

from compat_lab.errors import ConfigError
from compat_lab.verify import CHECKS, VerifyConfig, run_check, run_checks

# reduced sizes; the default config runs the full-size suite
FAST = dict(oracle_instances=10, oracle_steps=200, small_instances=10, contraction_points=20001,
            contraction_t_max=200, mc_thetas=3, mc_samples=1_000_000, mc_p=100, spread_n=50, spread_p=300,
            spread_seeds=5)


@pytest.mark.parametrize('name', CHECKS)
def test_check_passes(name):
    result = run_check(name, VerifyConfig(checks=(name,), **FAST))
    assert result.passed, result.detail
    assert result.runtime >= 0.0
    assert math.isfinite(result.observed)


def test_injected_stability_violation_fails():
    cfg = VerifyConfig(checks=('closed_form_vs_iterative', 'contraction_grid'), lr_scale=4.0, **FAST)
    report = run_checks(cfg)
    by_name = {r.name: r for r in report.results}
    assert not by_name['closed_form_vs_iterative'].passed
    assert 'StabilityError' in by_name['closed_form_vs_iterative'].detail
    assert by_name['contraction_grid'].passed
    assert not report.passed
    assert report.to_dict()['num_checks'] == 2


def test_no_checks():
    report = run_checks(VerifyConfig(checks=()))
    assert report.results == [] and report.passed


def test_from_config():
    cfg = VerifyConfig.from_config({'checks': ['k_order'], 'lr_scale': 2, 'oracle_tol': '1e-6',
                                    'small_epochs': [0, 3]}, seed=9)
    assert cfg.checks == ('k_order',)
    assert cfg.lr_scale == 2.0 and cfg.oracle_tol == 1e-6
    assert cfg.small_epochs == (0, 3)
    assert cfg.seed == 9
    with pytest.raises(ConfigError):
        VerifyConfig.from_config({'checks': ['fourier']})
