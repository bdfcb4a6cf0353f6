"""Multiscale correlated-noise filtering: full and averaged particle filters and their comparison."""
from .averaged_model import AveragedModel, TensorGrid, load_averaged_model, save_averaged_model
from .cell_problem import (averaged_coefficients, check_assumptions, check_centering,
                           estimate_stationary, generator_residual, semigroup_mc, solve_poisson)
from .filters import (LinearSpec, MeasurePath, ParticleEnsemble, ResamplePolicy, kalman_bucy,
                      normalize, particle_filter_averaged, particle_filter_full)
from .metrics import (ConvergenceReport, TestDictionary, bl_distance, convergence_experiment,
                      make_dictionary, path_distance)
from .registry import REGISTRY, build_model
from .sde_core import MultiscaleModel, simulate_multiscale

__version__ = "0.1.0"
