"""Synthetic control with proxies and surrogates, estimated by GMM."""

from .dgp import DgpConfig, simulate_contaminated, simulate_dgp, simulate_with_latents, true_parameters
from .errors import DataError, NumericalError, ProxscError
from .estimate import Estimate, estimate
from .gmm import CovSpec, GmmFit, WeightScheme, confidence_interval, j_test, solve
from .moments import InstrumentChoice, MomentSystem, build_system
from .montecarlo import McConfig, McReport, emit_table, run_mc
from .panel import EstimatorKind, Panel, load_panel, save_panel

__version__ = "0.1.0"

__all__ = [
    "CovSpec",
    "DataError",
    "DgpConfig",
    "Estimate",
    "EstimatorKind",
    "GmmFit",
    "InstrumentChoice",
    "McConfig",
    "McReport",
    "MomentSystem",
    "NumericalError",
    "Panel",
    "ProxscError",
    "WeightScheme",
    "build_system",
    "confidence_interval",
    "emit_table",
    "estimate",
    "j_test",
    "load_panel",
    "run_mc",
    "save_panel",
    "simulate_contaminated",
    "simulate_dgp",
    "simulate_with_latents",
    "solve",
    "true_parameters",
]
