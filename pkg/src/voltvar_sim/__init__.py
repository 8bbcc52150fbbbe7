"""Local volt/VAR control simulator and analysis toolkit.

Simulates droop-based PV inverter var control on radial distribution
feeders: a Newton power-flow core with voltage-sensitivity extraction,
the conventional/delayed/adaptive inner dispatch laws, the two-strategy
outer parameter-adaptation loop, closed-form stability and convergence
analytics, and a scenario-driven quasi-static time-series engine.
"""

from .adaptation import (
    AdaptiveConfig,
    WindowStats,
    capacity_limits,
    outer_loop_step,
    strategy1_update_qp,
    strategy2_update_slope,
    window_stats,
)
from .analysis import (
    ConvergenceReport,
    StabilityReport,
    outer_b_matrix,
    predict_sse,
    required_dq,
    spectral_radius,
    sse_adaptive_prediction,
    stability_report,
)
from .control import (
    AdaptiveParams,
    ControllerKind,
    DroopParams,
    adaptive_dispatch,
    delayed_dispatch,
    droop_dispatch,
    slope_to_cutoffs,
)
from .feeder import (
    Bus,
    FeederError,
    FeederModel,
    Line,
    PowerFlowError,
    PowerFlowSolution,
    PvUnit,
    apply_topology_event,
    feeder_from_dict,
    feeder_to_dict,
    load_feeder,
    sensitivity_matrix,
    solve_power_flow,
)
from .presets import get_preset, list_presets, load_builtin_feeder, override_scenario
from .sim import (
    CloudCover,
    Intermittency,
    LinearizedFeeder,
    LoadScale,
    MetricsLimits,
    MetricsReport,
    Scenario,
    SetpointChange,
    SimulationEngine,
    SimulationError,
    SimulationTrace,
    SubstationVoltage,
    SwitchEvent,
    TelegraphSpec,
    linearize,
    load_scenario,
    metrics,
    read_trace_csv,
    run,
    scenario_from_dict,
    scenario_to_dict,
    write_params_csv,
    write_trace_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig",
    "AdaptiveParams",
    "Bus",
    "CloudCover",
    "ControllerKind",
    "ConvergenceReport",
    "DroopParams",
    "FeederError",
    "FeederModel",
    "Intermittency",
    "Line",
    "LinearizedFeeder",
    "LoadScale",
    "MetricsLimits",
    "MetricsReport",
    "PowerFlowError",
    "PowerFlowSolution",
    "PvUnit",
    "Scenario",
    "SetpointChange",
    "SimulationEngine",
    "SimulationError",
    "SimulationTrace",
    "StabilityReport",
    "SubstationVoltage",
    "SwitchEvent",
    "TelegraphSpec",
    "WindowStats",
    "adaptive_dispatch",
    "apply_topology_event",
    "capacity_limits",
    "delayed_dispatch",
    "droop_dispatch",
    "feeder_from_dict",
    "feeder_to_dict",
    "get_preset",
    "linearize",
    "list_presets",
    "load_builtin_feeder",
    "load_feeder",
    "load_scenario",
    "metrics",
    "outer_b_matrix",
    "outer_loop_step",
    "override_scenario",
    "predict_sse",
    "read_trace_csv",
    "required_dq",
    "run",
    "scenario_from_dict",
    "scenario_to_dict",
    "sensitivity_matrix",
    "slope_to_cutoffs",
    "solve_power_flow",
    "spectral_radius",
    "sse_adaptive_prediction",
    "stability_report",
    "strategy1_update_qp",
    "strategy2_update_slope",
    "window_stats",
    "write_params_csv",
    "write_trace_csv",
]
