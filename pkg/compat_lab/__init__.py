__version__ = "0.3.0"

from compat_lab.spectrum import make_spectrum, effective_dims, k2_dim, rate_table, regime_report
from compat_lab.instance import ProblemInstance, build_instance, sample_dataset, exact_risk
from compat_lab.trajectory import TrajectoryConfig, closed_form_theta, gd_iterative, min_norm, risk_trajectory
from compat_lab.bounds import CtnStrategy, bound_B, bound_V, bound_report, comparison_bounds, min_bound_over_t
from compat_lab.montecarlo import ExperimentPlan, run_experiment, table_report
