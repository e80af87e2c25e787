import math

import pytest
import torch

from compat_lab.errors import ConfigError, DivergenceError, StabilityError
from compat_lab.instance import ProblemInstance, exact_risk, make_theta_star, sample_dataset
from compat_lab.spectrum import Constant, InversePolynomial
from compat_lab.trajectory import (RiskTrajectory, TrajectoryConfig, average_trajectories, closed_form_theta,
                                   filter_factors, gd_iterative, geometric_grid, min_norm, norm_growth_slope,
                                   region_scan, risk_trajectory, stable_learning_rate)
from compat_lab.bounds import explicit_BC_matrices


def small_dataset(seed=0, n=5, p=8):
    spectrum = InversePolynomial(1.0, p=p)
    inst = ProblemInstance(spectrum=spectrum, n=n, p=p, theta_star=make_theta_star('isotropic', p, seed=seed))
    ds = sample_dataset(inst, seed)
    return inst, ds, 0.5 * n / ds.mu[0].item()


@pytest.mark.parametrize('points_per_decade', [5, 20])
@pytest.mark.parametrize('t_max', [1, 37.4, 1000, 12345.6])
def test_geometric_grid(t_max, points_per_decade):
    grid = geometric_grid(t_max, points_per_decade)
    assert grid[0] == 0
    assert all(b > a for a, b in zip(grid, grid[1:]))
    assert grid[-1] == round(t_max)


def test_geometric_grid_density():
    grid = geometric_grid(1000, 10)
    assert grid[:4] == (0, 1, 2, 3)
    assert 100 in grid and 1000 in grid


def test_stable_learning_rate():
    spectrum = InversePolynomial(2.0)
    assert math.isclose(stable_learning_rate(spectrum), 3.0 / math.pi ** 2, rel_tol=1e-12)
    with pytest.raises(ConfigError):
        stable_learning_rate(spectrum, c=0.0)


def test_trajectory_config_from_config():
    spectrum = InversePolynomial(2.0, p=1000)
    threshold = stable_learning_rate(spectrum)
    cfg = TrajectoryConfig.from_config({'learning_rate': None, 'points_per_decade': 10}, spectrum, 100)
    assert cfg.learning_rate == threshold
    assert cfg.t_grid[-1] == round(100 * 100 / threshold)
    cfg = TrajectoryConfig.from_config({'learning_rate': 0.1, 'grid_mode': 'explicit', 't_grid': [0, 5, 10]},
                                       spectrum, 100)
    assert cfg.t_grid == (0, 5, 10)
    with pytest.raises(StabilityError):
        TrajectoryConfig.from_config({'learning_rate': 2 * threshold}, spectrum, 100)
    with pytest.raises(ConfigError):
        TrajectoryConfig.from_config({'grid_mode': 'explicit', 't_grid': [0, 10, 5]}, spectrum, 100)
    with pytest.raises(ConfigError):
        TrajectoryConfig.from_config({'grid_mode': 'linear'}, spectrum, 100)


@pytest.mark.parametrize('cfg', [
    {'grid_mode': 'explicit', 't_grid': None},
    {'grid_mode': 'explicit'},
    {'grid_mode': 'explicit', 't_grid': [0, 'ten']},
    {'learning_rate': 'fast'},
    {'points_per_decade': 'dense'},
    {'t_max': [100]},
])
def test_trajectory_config_rejects_malformed_values(cfg):
    with pytest.raises(ConfigError):
        TrajectoryConfig.from_config(cfg, InversePolynomial(2.0, p=1000), 100)


@pytest.mark.parametrize('seed', range(5))
def test_closed_form_matches_iterative(seed):
    inst, ds, lr = small_dataset(seed)
    thetas = gd_iterative(ds, torch.zeros(ds.p, dtype=torch.float64), lr, 50)
    assert thetas.shape == (51, ds.p)
    for t in range(51):
        assert torch.allclose(closed_form_theta(ds, lr, t), thetas[t], rtol=0.0, atol=1e-10)


@pytest.mark.parametrize('t', [1, 10, 100])
def test_convergence_to_min_norm(t):
    inst, ds, lr = small_dataset(3)
    theta_hat = min_norm(ds)
    rate = (1.0 - lr * ds.mu[-1].item() / ds.n) ** t
    gap = (closed_form_theta(ds, lr, t) - theta_hat).norm().item()
    assert gap <= rate * theta_hat.norm().item() * (1 + 1e-12)


@pytest.mark.parametrize('seed', range(3))
def test_min_norm_interpolates(seed):
    inst, ds, _ = small_dataset(seed)
    theta_hat = min_norm(ds)
    assert torch.allclose(ds.X @ theta_hat, ds.Y, atol=1e-10)
    assert torch.allclose(theta_hat, torch.linalg.pinv(ds.X) @ ds.Y, atol=1e-10)
    torch.random.manual_seed(seed)
    nu = torch.randn(ds.p, dtype=torch.float64)
    nu = nu - ds.W @ (ds.W.T @ nu)
    assert theta_hat.norm() <= (theta_hat + nu).norm()


def test_unstable_step_raises():
    inst, ds, lr = small_dataset(0)
    with pytest.raises(StabilityError):
        filter_factors(ds, 4 * lr, [1])
    with pytest.raises(DivergenceError):
        gd_iterative(ds, torch.zeros(ds.p, dtype=torch.float64), 8 * lr, 2000)


@pytest.mark.parametrize('seed', range(3))
def test_risk_trajectory_matches_direct_evaluation(seed):
    inst, ds, lr = small_dataset(seed)
    cfg = TrajectoryConfig(learning_rate=lr, t_grid=(0, 1, 2, 5, 10, 50, 500), grid_mode='explicit')
    traj = risk_trajectory(ds, inst.spectrum, inst.theta_star, cfg)
    direct = torch.tensor([exact_risk(inst.spectrum, closed_form_theta(ds, lr, t), inst.theta_star)
                           for t in cfg.t_grid], dtype=torch.float64)
    assert torch.allclose(traj.risk, direct, rtol=1e-10, atol=1e-12)
    assert math.isclose(traj.min_norm_risk, exact_risk(inst.spectrum, min_norm(ds), inst.theta_star),
                        rel_tol=1e-10)
    norms = torch.stack([closed_form_theta(ds, lr, t).norm() for t in cfg.t_grid])
    assert torch.allclose(traj.param_norm, norms, atol=1e-10)


@pytest.mark.parametrize('t', [0, 1, 10, 100])
def test_bias_variance_split(t):
    inst, ds, lr = small_dataset(1)
    cfg = TrajectoryConfig(learning_rate=lr, t_grid=(t,), grid_mode='explicit')
    traj = risk_trajectory(ds, inst.spectrum, inst.theta_star, cfg, decompose=True)
    mats = explicit_BC_matrices(ds, inst.spectrum, lr, t)
    assert math.isclose(traj.bias_part[0].item(), 0.5 * mats.bias_value, rel_tol=1e-9, abs_tol=1e-14)
    assert math.isclose(traj.variance_part[0].item(), 0.5 * mats.variance_value(ds.epsilon), rel_tol=1e-9,
                        abs_tol=1e-14)
    assert traj.risk[0].item() <= 2 * (traj.bias_part[0].item() + traj.variance_part[0].item()) + 1e-14


def test_risk_curve_is_u_shaped():
    spectrum = InversePolynomial(2.0, p=1000)
    inst = ProblemInstance(spectrum=spectrum, n=100, p=1000, theta_star=make_theta_star('harmonic', 1000))
    cfg = TrajectoryConfig.from_config({}, spectrum, 100)
    traj = risk_trajectory(sample_dataset(inst, 0), spectrum, inst.theta_star, cfg)
    assert 0 < traj.argmin_index < len(traj.t_grid) - 1
    assert traj.risk[0] > traj.optimal_risk and traj.risk[-1] > traj.optimal_risk
    assert traj.risk[-1] > 10 * traj.optimal_risk
    assert traj.min_norm_risk > 5 * traj.optimal_risk


def test_argmin_takes_first_tie():
    traj = RiskTrajectory(t_grid=(0, 1, 2, 3), risk=torch.tensor([3.0, 1.0, 1.0, 2.0], dtype=torch.float64),
                          min_norm_risk=2.0, learning_rate=0.1, n=10)
    assert traj.argmin_t == 1
    assert traj.final_gap == 0.0


def test_average_trajectories():
    grid = (0, 1, 2)
    a = RiskTrajectory(grid, torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), 1.0, 0.1, 10)
    b = RiskTrajectory(grid, torch.tensor([3.0, 2.0, 1.0], dtype=torch.float64), 3.0, 0.1, 10)
    avg = average_trajectories([a, b])
    assert torch.allclose(avg.risk, torch.full((3,), 2.0, dtype=torch.float64))
    assert avg.min_norm_risk == 2.0
    with pytest.raises(ConfigError):
        average_trajectories([a, RiskTrajectory((0, 1, 3), a.risk, 1.0, 0.1, 10)])


def test_region_scan_longest_run():
    risk = torch.tensor([1.0, 0.1, 0.5, 0.1, 0.1, 0.1, 0.9], dtype=torch.float64)
    traj = RiskTrajectory((0, 1, 2, 4, 8, 16, 32), risk, 1.0, learning_rate=0.5, n=4)
    empty = RiskTrajectory((0, 1), torch.tensor([1.0, 1.0], dtype=torch.float64), 1.0, learning_rate=0.5, n=8)
    first, second = region_scan({8: empty, 4: traj}, threshold=0.2)
    assert (first.n, first.start_t, first.stop_t) == (4, 4, 16)
    assert first.start_scaled == 2.0 and first.stop_scaled == 2.0
    assert second.empty


def test_region_grows_with_n():
    spectrum = InversePolynomial(2.0, p=1000)
    trajectories = {}
    for n in (50, 100, 200):
        inst = ProblemInstance(spectrum=spectrum, n=n, p=1000, theta_star=make_theta_star('harmonic', 1000))
        cfg = TrajectoryConfig.from_config({'points_per_decade': 20}, spectrum, n)
        trajs = [risk_trajectory(sample_dataset(inst, seed), spectrum, inst.theta_star, cfg) for seed in range(5)]
        trajectories[n] = average_trajectories(trajs)
    intervals = region_scan(trajectories, threshold=0.2)
    stops = [iv.stop_t for iv in intervals]
    assert all(not iv.empty for iv in intervals)
    assert stops[0] < stops[2]


def test_norm_grows_linearly_before_interpolation():
    n = 50
    spectrum = Constant(eps=1.0, n=n)
    p = spectrum.p
    inst = ProblemInstance(spectrum=spectrum, n=n, p=p, theta_star=make_theta_star('e1', p, norm=0.0))
    cfg = TrajectoryConfig(learning_rate=0.5, t_grid=tuple(range(0, 101)), grid_mode='explicit')
    traj = risk_trajectory(sample_dataset(inst, 0), spectrum, inst.theta_star, cfg)
    slope = norm_growth_slope(traj)
    assert abs(slope - 1.0) < 0.15
