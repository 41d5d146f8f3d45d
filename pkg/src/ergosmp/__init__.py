"""Ergodic stochastic control of dissipative SDEs.

Forward simulation on shared noise, backward-regression costate solvers,
duality verification, necessary/sufficient optimality checks and projected
adjoint-gradient optimization of feedback laws, validated against a
linear-quadratic Riccati oracle.
"""

from .adjoint import (
    AdjointError,
    AdjointSolution,
    ConsistencyReport,
    RegressionBasis,
    check_truncation_consistency,
    extend_to_infinite,
    solve_adjoint_finite,
)
from .config import ConfigError, load_model_config, model_config_dict, parse_control_law, save_model_config
from .duality import DualityReport, build_eta, build_gamma, build_rho, verify_duality_finite, verify_duality_infinite
from .ergodic_cost import (
    ErgodicCostReport,
    GateauxReport,
    NullTestReport,
    estimate_cost_T,
    estimate_ergodic_cost,
    estimate_gateaux,
    local_perturbation_null_test,
)
from .forward import (
    DualEnsemble,
    ExpansionReport,
    FirstVariationEnsemble,
    PathEnsemble,
    SimulationError,
    TimeGrid,
    direction_from_laws,
    ensemble_from_binary,
    ensemble_to_binary,
    ensemble_to_csv,
    estimate_moment,
    simulate_affine_dual,
    simulate_first_variation,
    simulate_perturbed,
    simulate_state,
    verify_expansion_residual,
)
from .model import (
    ControlLaw,
    ConvexSet,
    DissipativityReport,
    EvalResult,
    ModelError,
    ModelSpec,
    check_dissipativity,
    eval_model,
    project_control,
)
from .smp import (
    OptimizeResult,
    SmpReport,
    SufficiencyReport,
    candidate_battery,
    check_sufficiency,
    evaluate_variational_inequality,
    grad_u_hamiltonian,
    hamiltonian,
    optimize_control,
)

__version__ = "0.1.0"
