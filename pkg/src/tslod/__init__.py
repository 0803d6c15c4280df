"""Two-stage certified reduced basis solver for Petrov-Galerkin LOD."""

from .coeff import make_problem, random_parameters, training_set
from .grid import MeshHierarchy, choose_oversampling
from .harness import ExperimentConfig, Report, report_metrics, run_offline, run_validate
from .lod import LodDiscretization, pglod_solve, two_scale_solve_monolithic
from .stage1 import rblod_solve, train_stage1
from .stage2 import GreedyAbort, train_two_scale_rom, ts_rom_solve

__version__ = '0.1.0'
