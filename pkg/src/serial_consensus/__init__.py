"""Serial consensus for integrator networks.

Assembles n-th order serial-consensus closed loops from a pole set and a
graph Laplacian, computes infinity-norm transient performance bounds
(including the minimal condition number of the diagonalizing matrix),
simulates trajectories including PI-controlled vehicle formations under
load disturbances, and verifies the bounds against simulated transients.
"""

from .graphs import (
    DirectedGraph,
    LaplacianMatrix,
    graph_from_json,
    graph_from_laplacian,
    has_directed_spanning_tree,
    inf_norm,
    kron,
    laplacian_from_graph,
    load_graph,
    path_ahead_graph,
    path_ahead_laplacian,
)
from .spectra import (
    CompanionMatrix,
    ConditionResult,
    Diagonalization,
    NonPositivePoleError,
    NotInverseError,
    PoleSet,
    RepeatedPoleError,
    SingularScalingError,
    companion,
    condition_of,
    minimal_condition_number,
    optimal_condition,
    poles_to_coefficients,
    vandermonde_diagonalization,
)
from .dynamics import (
    NonFiniteStateError,
    PerformanceBound,
    SerialConsensusSystem,
    Trajectory,
    XiState,
    assemble,
    expm_oracle,
    scalable_performance_ratio,
    simulate,
    theorem1_bound,
    verify_transient,
    xi_from_x,
)
from .formation import (
    Disturbance,
    DisturbanceConstants,
    FormationResult,
    FormationScenario,
    MissingW0Error,
    NoSpanningTreeWarning,
    NotInImageError,
    PiGains,
    WrongOrderError,
    check_disturbance_rejection,
    closed_loop_system,
    disturbance_vector,
    pi_control_law,
    pi_gains,
    scenario_from_json,
    second_order_reference_controller,
    simulate_formation,
    solve_w0,
    stationary_relative_error,
    theorem2_constants,
    theorem2_transient_bound_check,
)

__version__ = "0.1.0"
