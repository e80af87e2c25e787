import torch

from compat_lab.instance import build_instance, exact_risk, sample_dataset
from compat_lab.trajectory import TrajectoryConfig, closed_form_theta, risk_trajectory
from compat_lab.utils.benchmark import benchmark_compare


def risk_materialized(ds, spectrum, theta_star, cfg):
    """Reference path: form theta_t in R^p for every epoch on the grid."""
    return torch.tensor([exact_risk(spectrum, closed_form_theta(ds, cfg.learning_rate, t), theta_star)
                         for t in cfg.t_grid], dtype=torch.float64)


def risk_reduced(ds, spectrum, theta_star, cfg):
    return risk_trajectory(ds, spectrum, theta_star, cfg).risk


torch.set_num_threads(1)
repeats = 5
for n, p in [(100, 1000), (300, 3000), (1000, 10000)]:
    inst = build_instance({'family': 'inv_poly', 'alpha': 2}, {'n': n, 'p': p})
    ds = sample_dataset(inst, seed=0)
    cfg = TrajectoryConfig.from_config({'points_per_decade': 20}, inst.spectrum, n)
    fast = risk_reduced(ds, inst.spectrum, inst.theta_star, cfg)
    ref = risk_materialized(ds, inst.spectrum, inst.theta_star, cfg)
    print(f'n={n}, p={p}, {len(cfg.t_grid)} epochs, max abs diff {(fast - ref).abs().max().item():.2e}')
    benchmark_compare({'n x n reduction': risk_reduced, 'materialized theta_t': risk_materialized},
                      ds, inst.spectrum, inst.theta_star, cfg, repeats=repeats)
