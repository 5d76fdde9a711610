"""Probability-measure layer: empirical measures, d_P, occupation measures, sweeps."""

from .dynamics import (AutonomyReport, InvarianceResult, SweepTable, TailReport, asymptotic_autonomy,
                       evaluate_family, intensity_sweep, invariance_residual, nonincreasing_within_ci,
                       occupation_measure, pushforward, ramp_family, tail_constants, v_tail_check)
from .empirical import EmpiricalMeasure, MeasureBallP4, p4_radius, quasi_tight_check
from .metric import MAX_LP_SUPPORT, SupportTooLargeError, dp_metric, dump_lp, joint_support

__all__ = [
    "AutonomyReport", "EmpiricalMeasure", "InvarianceResult", "MAX_LP_SUPPORT", "MeasureBallP4",
    "SupportTooLargeError", "SweepTable", "TailReport", "asymptotic_autonomy", "dp_metric", "dump_lp",
    "evaluate_family", "intensity_sweep", "invariance_residual", "joint_support",
    "nonincreasing_within_ci", "occupation_measure", "p4_radius", "pushforward", "quasi_tight_check",
    "ramp_family", "tail_constants", "v_tail_check",
]
