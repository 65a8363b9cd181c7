"""Complier expected-shortfall treatment effects with a binary instrument."""

__version__ = "0.1.0"

from .bootstrap import BootstrapResult, bootstrap_variance, confidence_interval
from .data import CellPartition, ObservationFrame, Schema, load_csv, stratify, write_csv
from .estimators import CRESTE, ComplianceWeighter, ExpectedShortfallRegressor, WeightedQuantileRegressor
from .exceptions import (
    BandwidthError,
    ConfigError,
    CresteError,
    DataError,
    DegenerateInstrumentError,
    NumericalError,
    RankDeficientError,
)
from .kernels import ComplianceWeights, KernelSpec, cv_bandwidth, estimate_kappa
from .quantile import QuantileFit, fit_wqr, wqr
from .shortfall import CresteEstimate, EstimatorConfig, ShortfallFit, fit_es, two_stage_fit
from .simulation import DgpSpec, MetricsRow, run_simulation, simulate_sample, true_effects

__all__ = [
    "BandwidthError", "BootstrapResult", "CRESTE", "CellPartition", "ComplianceWeighter",
    "ComplianceWeights", "ConfigError", "CresteError", "CresteEstimate", "DataError",
    "DegenerateInstrumentError", "DgpSpec", "EstimatorConfig", "ExpectedShortfallRegressor",
    "KernelSpec", "MetricsRow", "NumericalError", "ObservationFrame", "QuantileFit",
    "RankDeficientError", "Schema", "ShortfallFit", "WeightedQuantileRegressor",
    "bootstrap_variance", "confidence_interval", "cv_bandwidth", "estimate_kappa", "fit_es",
    "fit_wqr", "load_csv", "run_simulation", "simulate_sample", "stratify", "true_effects",
    "two_stage_fit", "write_csv", "wqr",
]
