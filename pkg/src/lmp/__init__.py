"""Latent Markov panel model of earnings dynamics."""

from .diagnostics import DiagnosticsOptions, DiagnosticsReport, build_report, persistence_surface
from .msem import ModelParams, MsemConfig, MsemState, run_msem
from .panel_io import PanelDataset, RawPanel, parse_panel, residualize
from .sieve import HermiteBasis, QuantileSieve, TauGrid
from .simulator import DgpSpec, simulate, simulate_canonical, simulate_from_model

__version__ = "0.1.0"

__all__ = [
    "DgpSpec", "DiagnosticsOptions", "DiagnosticsReport", "build_report", "persistence_surface", "HermiteBasis", "ModelParams", "MsemConfig", "MsemState", "PanelDataset",
    "QuantileSieve", "RawPanel", "TauGrid", "parse_panel", "residualize", "run_msem",
    "simulate", "simulate_canonical", "simulate_from_model",
]
