"""feederflex: day-ahead demand-reduction scheduling on unbalanced radial
low-voltage feeders, with exact AC verification and bound tightening."""

from .acpf import ACPFSolution, CongestionReport, detect_congestion, lin_vs_ac_gap, solve_ac_pf
from .contracts import (
    Contract,
    ModalityPreset,
    Schedule,
    canonical_y_z,
    contracts_for,
    modality_by_name,
    preset_modalities,
    verify_schedule,
)
from .harness import MetricsTable, SweepConfig, emit_report, run_sweep
from .linearflow import (
    BoundTightening,
    LinearConstraintBlock,
    VariableIndex,
    build_balance,
    build_limits,
    build_ohm,
    evaluate_lin_pf,
    gamma_matrix,
    offdiag_flow,
)
from .milp import (
    MILPModel,
    SolveOptions,
    SolveResult,
    brute_force_schedule,
    build_milp,
    comfort_rows,
    export_lp,
    lp_relax_solve,
    relative_objective_error,
    solve_milp,
    user_response_rows,
)
from .network import (
    Branch,
    Bus,
    Feeder,
    UserAttachment,
    ValidationReport,
    load_feeder,
    per_unit_convert,
    radial_ordering,
    save_feeder,
    validate_feeder,
)
from .scenarios import (
    ProfileSet,
    ScenarioParams,
    attach_ev_sessions,
    generate_baseline_profiles,
    generate_feeder,
    generate_scenario,
    load_profiles,
    save_profiles,
)
from .tightening import TighteningResult, tighten_and_resolve

__version__ = "0.1.0"
