import math

import pytest
import torch

from compat_lab.errors import ConfigError, RankDeficientSampleError
from compat_lab.instance import (ProblemInstance, build_instance, dataset_from_arrays, eigen_spread_check,
                                 exact_risk, factorize, make_theta_star, monte_carlo_risk, sample_dataset)
from compat_lab.spectrum import Explicit, InversePolynomial


def make_instance(n=10, p=30, alpha=2.0, feature_law='gaussian', noise_sigma=1.0):
    spectrum = InversePolynomial(alpha, p=p)
    return ProblemInstance(spectrum=spectrum, n=n, p=p, theta_star=make_theta_star('harmonic', p),
                           noise_sigma=noise_sigma, feature_law=feature_law)


@pytest.mark.parametrize('mode', ['harmonic', 'e1', 'isotropic'])
@pytest.mark.parametrize('norm', [1.0, 3.5])
def test_theta_star_norm(mode, norm):
    theta = make_theta_star(mode, 50, norm=norm, seed=7)
    assert theta.shape == (50,)
    assert math.isclose(theta.norm().item(), norm, rel_tol=1e-12)


def test_theta_star_modes():
    harmonic = make_theta_star('harmonic', 4)
    assert torch.allclose(harmonic / harmonic[0], torch.tensor([1.0, 1 / 2, 1 / 3, 1 / 4], dtype=torch.float64))
    assert torch.equal(make_theta_star('isotropic', 20, seed=3), make_theta_star('isotropic', 20, seed=3))
    with pytest.raises(ConfigError):
        make_theta_star('isotropic', 20)
    with pytest.raises(ConfigError):
        make_theta_star('sparse', 20)


def test_instance_validation():
    with pytest.raises(ConfigError):
        make_instance(n=30, p=30)
    with pytest.raises(ConfigError):
        make_instance(noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        make_instance(feature_law='uniform')
    with pytest.raises(ConfigError):
        ProblemInstance(spectrum=InversePolynomial(2.0, p=20), n=5, p=30, theta_star=make_theta_star('e1', 30))


def test_build_instance():
    inst = build_instance({'family': 'constant', 'eps': 0.5}, {'n': 100, 'p': None})
    assert inst.p == 1000
    inst = build_instance({'family': 'inv_poly', 'alpha': 2}, {'n': 100, 'p': 1000, 'theta_norm': 2.0})
    assert inst.p == 1000 and math.isclose(inst.theta_star.norm().item(), 2.0, rel_tol=1e-12)
    with pytest.raises(ConfigError):
        build_instance({'family': 'inv_poly', 'alpha': 2}, {'n': 100, 'p': None})


@pytest.mark.parametrize('instance_cfg', [
    {'p': 1000},
    {'n': 'abc', 'p': 1000},
    {'n': 100, 'p': [1000]},
    {'n': 100, 'p': 1000, 'noise_sigma': 'loud'},
    {'n': 100, 'p': 1000, 'theta_seed': 'x'},
])
def test_build_instance_rejects_malformed_values(instance_cfg):
    with pytest.raises(ConfigError):
        build_instance({'family': 'inv_poly', 'alpha': 2}, instance_cfg)


@pytest.mark.parametrize('feature_law', ['gaussian', 'rademacher'])
def test_sampling_is_deterministic(feature_law):
    inst = make_instance(feature_law=feature_law)
    a, b, c = sample_dataset(inst, 11), sample_dataset(inst, 11), sample_dataset(inst, 12)
    assert torch.equal(a.X, b.X) and torch.equal(a.Y, b.Y)
    assert not torch.equal(a.X, c.X)


def test_rademacher_entries():
    inst = make_instance(feature_law='rademacher')
    ds = sample_dataset(inst, 0)
    scaled = ds.X / inst.eigenvalues.sqrt()
    assert torch.allclose(scaled.abs(), torch.ones_like(scaled))


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_factorization(seed):
    ds = sample_dataset(make_instance(), seed)
    assert torch.allclose(ds.U @ torch.diag(ds.mu.sqrt()) @ ds.W.T, ds.X, atol=1e-10)
    assert torch.allclose(ds.W.T @ ds.W, torch.eye(ds.n, dtype=torch.float64), atol=1e-10)
    assert torch.linalg.matrix_norm(ds.U.T @ ds.U - torch.eye(ds.n, dtype=torch.float64), ord=2) <= 1e-10
    assert torch.all(ds.mu[:-1] >= ds.mu[1:])
    assert torch.allclose(ds.Y, ds.X @ ds.theta_star + ds.epsilon)


def test_rank_deficient_sample():
    X = torch.randn(4, 10, dtype=torch.float64)
    X[3] = X[2]
    with pytest.raises(RankDeficientSampleError) as exc_info:
        factorize(X, seed=42)
    assert exc_info.value.seeds == [42]
    with pytest.raises(RankDeficientSampleError):
        dataset_from_arrays(X, torch.zeros(10, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))


def test_mean_row_norm_matches_trace():
    inst = make_instance(n=100, p=1000)
    mean_sq = sum(sample_dataset(inst, seed).X.pow(2).sum(1).mean().item() for seed in range(100)) / 100
    assert abs(mean_sq / 1.64393 - 1.0) < 0.05


def test_exact_risk():
    spectrum = Explicit(values=(2.0, 1.0))
    theta = torch.tensor([1.0, 1.0], dtype=torch.float64)
    assert exact_risk(spectrum, theta, torch.zeros(2, dtype=torch.float64)) == 1.5
    assert exact_risk(spectrum, theta, theta) == 0.0
    with pytest.raises(ConfigError):
        exact_risk(spectrum, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))


@pytest.mark.parametrize('feature_law', ['gaussian', 'rademacher'])
def test_monte_carlo_risk_matches_exact(feature_law):
    torch.random.manual_seed(0)
    p = 50
    spectrum = InversePolynomial(2.0, p=p)
    theta_star = make_theta_star('harmonic', p)
    thetas = theta_star + torch.randn(3, p, dtype=torch.float64)
    estimates = monte_carlo_risk(spectrum, thetas, theta_star, num_samples=1_000_000, seed=5,
                                 chunk_size=50_000, feature_law=feature_law)
    exact = torch.tensor([exact_risk(spectrum, th, theta_star) for th in thetas], dtype=torch.float64)
    assert torch.allclose(estimates, exact, rtol=0.01)


@pytest.mark.parametrize('seed', range(10))
def test_eigen_spread(seed):
    inst = make_instance(n=100, p=1000)
    report = eigen_spread_check(sample_dataset(inst, seed), inst.spectrum, 100)
    assert report.ks[0] == 0 and report.ks[-1] == 99
    assert all(r > 0 for r in report.ratios)
    assert report.max_ratio < 10.0
