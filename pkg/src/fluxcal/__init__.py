"""Flux-crosstalk calibration by maximizing the periodicity of readout sweeps."""

from __future__ import annotations

from .coords import (
    LoopCalibrationResult,
    SingularMatrixError,
    TrialCompensation,
    apply_flux_map,
    assemble_residual_estimate,
    compensation_distance,
    optimum_compensation,
    residual_of,
    update_estimate,
    voltages_for_trial_flux,
)
from .device import DeviceConfig, SimulatedDevice, estimate_error, perturb_estimate
from .optimizers import EvaluationHistory, OptimizerConfig, optimize
from .calibrator import calibrate_all, calibrate_loop, periodicity_optimizer_config, scan_landscape_1d, scan_landscape_2d
from .periodicity import SweepRecord, correlation_at_lag, fit_period, score_periodicity
from .session import InitialEstimate, replay, run_landscape, run_periodicity, run_translation
from .translation import Coordinates, run_iteration, run_until_converged

__version__ = "0.1.0"

__all__ = [
    "Coordinates",
    "DeviceConfig",
    "EvaluationHistory",
    "InitialEstimate",
    "LoopCalibrationResult",
    "OptimizerConfig",
    "SimulatedDevice",
    "SingularMatrixError",
    "SweepRecord",
    "TrialCompensation",
    "apply_flux_map",
    "assemble_residual_estimate",
    "calibrate_all",
    "calibrate_loop",
    "compensation_distance",
    "correlation_at_lag",
    "estimate_error",
    "fit_period",
    "optimize",
    "optimum_compensation",
    "periodicity_optimizer_config",
    "perturb_estimate",
    "replay",
    "residual_of",
    "run_iteration",
    "run_landscape",
    "run_periodicity",
    "run_translation",
    "run_until_converged",
    "scan_landscape_1d",
    "scan_landscape_2d",
    "score_periodicity",
    "update_estimate",
    "voltages_for_trial_flux",
]
