"""Particle solvers for second-order mean field games and their sensitivities."""
from ._backend import BACKEND
from .measures import EmpiricalMeasure, w2_empirical, w2_to_dirac
from .model import (AssumptionConstants, LQParameters, TimeGrid, build_lq_model,
                    build_nonlinear_demo, generate_paths)

__version__ = "0.1.0"
