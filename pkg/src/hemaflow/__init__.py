"""Multiscale compartment dynamics: exact stochastic simulation of a
birth/differentiation/death cell hierarchy, deterministic solvers for its
large-population limit, and the diagnostics that tie the two together.
"""

from .config import ConfigBundle, LimitSettings, load_config
from .empirical import (AtomicMeasure, TestFunction, drift_terms,
                        empirical_measure, hat, identity,
                        martingale_residual, moment_bound_constants,
                        parse_test_function, pathwise_identity_residual,
                        qv_predicted, square)
from .errors import (CFLError, ConfigError, FlowAccuracyError,
                     MildConvergenceError, NumericalError)
from .flow import (FlowField, ZTrajectory, abs_diff_integral, flow,
                   inverse_space, inverse_time_kappa, stability_gap, tau)
from .limit import (DensityGrid, MeasureTrajectory, density_reconstruct,
                    limit_mass_balance, solve_mild, solve_upwind)
from .metrics import (BLWitness, ConvergenceReport, bl_bounds, bl_distance,
                      bl_distance_lp, convergence_study, snap_to_grid)
from .rates import (ModelConfig, RateModel, RateSpec, affine_rate,
                    constant_rate, make_model, model_z_dependent,
                    saturating_rate, stem_only_counts, tabulated_rate,
                    validate)
from .ssa import (CompartmentState, EnsembleResult, Trajectory, ensemble,
                  simulate, step, total_rate, transitions)

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure", "BLWitness", "CFLError", "CompartmentState",
    "ConfigBundle", "ConfigError", "ConvergenceReport", "DensityGrid",
    "EnsembleResult", "FlowAccuracyError", "FlowField", "LimitSettings",
    "MeasureTrajectory", "MildConvergenceError", "ModelConfig",
    "NumericalError", "RateModel", "RateSpec", "TestFunction", "Trajectory",
    "ZTrajectory", "abs_diff_integral", "affine_rate", "bl_bounds",
    "bl_distance", "bl_distance_lp", "constant_rate", "convergence_study",
    "density_reconstruct", "drift_terms", "empirical_measure", "ensemble",
    "flow", "hat", "identity", "inverse_space", "inverse_time_kappa",
    "limit_mass_balance", "load_config", "make_model", "martingale_residual",
    "model_z_dependent", "moment_bound_constants", "parse_test_function",
    "pathwise_identity_residual", "qv_predicted", "saturating_rate",
    "simulate", "snap_to_grid", "solve_mild", "solve_upwind", "square",
    "stability_gap", "stem_only_counts", "step", "tabulated_rate", "tau",
    "total_rate", "transitions", "validate",
]
