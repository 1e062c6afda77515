"""Day-ahead distribution feeder scheduling and marginal-cost pricing.

Builds and solves conic day-ahead programs on radial feeders (DistFlow
branch-flow relaxation), co-optimizing EV charging and PV inverter dispatch
against energy, loss, and transformer degradation costs; unbundles the
resulting nodal marginal costs into named components; and checks that the
posted prices support each device's own optimal schedule.
"""

from .feeder import (
    ExogenousTrajectories,
    Feeder,
    FeederFormatError,
    FeederValidationError,
    Line,
    ScenarioCase,
    Transformer,
    VoltageLimits,
    build_scenario,
    load_feeder,
    load_trajectories,
    save_feeder,
    save_trajectories,
)
from .thermal import AgingPwl, TransformerThermalParams, simulate_temperatures
from .powerflow import PowerFlowError, solve_distflow, two_bus_flow
from .fleet import (
    DerFleet,
    DerSchedule,
    Ev,
    FleetFormatError,
    Pv,
    bau_schedule,
    load_fleet,
    save_fleet,
    standard_fleet,
    tou_schedule,
)
from .opf import (
    OpfError,
    OpfSolution,
    build_branch_flow,
    build_full_opt,
    build_pq_opt,
    price_fixed_schedule,
    solve,
)
from .sensitivity import (
    SensitivityError,
    compute_sensitivities,
    finite_difference_check,
)
from .unbundle import (
    DlmcComponents,
    UnbundleError,
    decompose_transformer_component,
    export_price_signals,
    load_price_signals,
    read_components_csv,
    unbundle,
    write_components_csv,
)
from .selfsched import FixedPointReport, ev_opt, pv_opt, verify_fixed_point
from .runner import (
    MatrixConfig,
    MatrixError,
    emit_cost_lol_table,
    emit_dlmc_series,
    load_matrix,
    run_cell,
    run_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "AgingPwl",
    "DerFleet",
    "DerSchedule",
    "DlmcComponents",
    "Ev",
    "ExogenousTrajectories",
    "Feeder",
    "FeederFormatError",
    "FeederValidationError",
    "FixedPointReport",
    "FleetFormatError",
    "Line",
    "MatrixConfig",
    "MatrixError",
    "OpfError",
    "OpfSolution",
    "PowerFlowError",
    "Pv",
    "ScenarioCase",
    "SensitivityError",
    "Transformer",
    "TransformerThermalParams",
    "UnbundleError",
    "VoltageLimits",
    "bau_schedule",
    "build_branch_flow",
    "build_full_opt",
    "build_pq_opt",
    "build_scenario",
    "compute_sensitivities",
    "decompose_transformer_component",
    "emit_cost_lol_table",
    "emit_dlmc_series",
    "ev_opt",
    "export_price_signals",
    "finite_difference_check",
    "load_feeder",
    "load_fleet",
    "load_matrix",
    "load_price_signals",
    "load_trajectories",
    "price_fixed_schedule",
    "pv_opt",
    "read_components_csv",
    "run_cell",
    "run_matrix",
    "save_feeder",
    "save_fleet",
    "save_trajectories",
    "simulate_temperatures",
    "solve",
    "solve_distflow",
    "standard_fleet",
    "tou_schedule",
    "two_bus_flow",
    "unbundle",
    "verify_fixed_point",
    "write_components_csv",
]
