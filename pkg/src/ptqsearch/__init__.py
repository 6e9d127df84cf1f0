"""Search-based post-training quantization for small networks.

Weights and activations are quantized layer by layer on a symmetric
uniform grid; the clipping ratio and rounding hyper-parameters are
found by grid search refined with Bayesian optimization against task
accuracy, with per-layer bias correction applied when it helps.
"""

from .baselines import SELECTORS, clip_aciq, clip_kl, clip_mse
from .bayesopt import BOConfig, BOResult, bo_optimize
from .diagnostics import (
    CorrelationReport,
    TrajectoryReport,
    correlation_study,
    find_convexity_violations,
    interpolate_trajectory,
    pearson_r,
    plan_weight_set,
)
from .errors import (
    ArgumentError,
    DegenerateScaleError,
    DimensionError,
    FormatError,
)
from .model_graph import (
    CalibrationSet,
    Layer,
    ModelGraph,
    forward,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
    subset_per_class,
)
from .quant import (
    ActQuantState,
    LayerQuantState,
    QuantizationPlan,
    RoundingParams,
    WeightQuantState,
    bias_correction,
    calibrate_activation_threshold,
    clip_by_gamma,
    grid_limit,
    integer_consistency_check,
    quantize_activation,
    quantize_weights,
    round_first_order,
    round_rtn,
    round_second_order,
    rounding_offset_first,
    rounding_offset_second,
)
from .search import (
    GridSpec,
    Objective,
    QuantizableLayerSet,
    SearchTrace,
    TracePoint,
    run_baseline,
    run_qrater,
    sweep_phase,
    write_trace_jsonl,
)

__version__ = "0.1.0"

__all__ = [
    "ActQuantState",
    "ArgumentError",
    "BOConfig",
    "BOResult",
    "CalibrationSet",
    "CorrelationReport",
    "DegenerateScaleError",
    "DimensionError",
    "FormatError",
    "GridSpec",
    "Layer",
    "LayerQuantState",
    "ModelGraph",
    "Objective",
    "QuantizableLayerSet",
    "QuantizationPlan",
    "RoundingParams",
    "SELECTORS",
    "SearchTrace",
    "TracePoint",
    "TrajectoryReport",
    "WeightQuantState",
    "bias_correction",
    "bo_optimize",
    "calibrate_activation_threshold",
    "clip_aciq",
    "clip_by_gamma",
    "clip_kl",
    "clip_mse",
    "correlation_study",
    "find_convexity_violations",
    "forward",
    "grid_limit",
    "integer_consistency_check",
    "interpolate_trajectory",
    "load_calibration",
    "load_model",
    "pearson_r",
    "plan_weight_set",
    "quantize_activation",
    "quantize_weights",
    "round_first_order",
    "round_rtn",
    "round_second_order",
    "rounding_offset_first",
    "rounding_offset_second",
    "run_baseline",
    "run_qrater",
    "save_calibration",
    "save_model",
    "subset_per_class",
    "sweep_phase",
    "write_trace_jsonl",
]
