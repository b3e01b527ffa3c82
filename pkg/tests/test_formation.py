import numpy as np
import pytest

from serial_consensus.dynamics import expm_oracle, simulate
from serial_consensus.formation import (
    Disturbance,
    FormationScenario,
    MissingW0Error,
    NoSpanningTreeWarning,
    NotInImageError,
    WrongOrderError,
    check_disturbance_rejection,
    closed_loop_system,
    default_spacing,
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
from serial_consensus.graphs import (
    DirectedGraph,
    inf_norm,
    laplacian_from_graph,
    path_ahead_laplacian,
)
from serial_consensus.spectra import companion, poles_to_coefficients

CASE_STUDY_POLES = [1.0 / 3.0, 1.0, 3.0]


def hill_scenario(n_agents: int, poles=CASE_STUDY_POLES, controller="pi",
                  theta=0.1) -> FormationScenario:
    scenario, _ = scenario_from_json({
        "n_agents": n_agents,
        "poles": list(poles),
        "controller": controller,
        "v_ref": 10.0,
        "disturbance": {"type": "hill", "theta": theta, "g": 9.8},
    })
    return scenario


class TestPiGains:
    def test_case_study_values(self):
        gains = pi_gains(poles_to_coefficients([3.0, 1.0, 1.0 / 3.0]))
        np.testing.assert_allclose(
            [gains.velocity, gains.position, gains.integral],
            [13.0 / 3.0, 13.0 / 3.0, 1.0], rtol=1e-14)

    def test_matches_symmetric_functions_for_random_triples(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = np.exp(rng.uniform(np.log(0.2), np.log(5.0), 3))
            if np.abs(p[:, None] - p[None, :])[~np.eye(3, dtype=bool)].min() < 1e-3:
                continue
            g = pi_gains(poles_to_coefficients(p))
            np.testing.assert_allclose(g.velocity, p.sum(), rtol=1e-12)
            np.testing.assert_allclose(
                g.position, p[0] * p[1] + p[0] * p[2] + p[1] * p[2], rtol=1e-12)
            np.testing.assert_allclose(g.integral, p.prod(), rtol=1e-12)

    def test_requires_three_poles(self):
        with pytest.raises(WrongOrderError):
            pi_gains(poles_to_coefficients([1.0, 2.0]))


class TestPiControlLaw:
    def test_zero_at_equilibrium(self):
        scenario = hill_scenario(5, theta=0.0)
        u = pi_control_law(scenario)
        out = u(scenario.spacing, np.zeros(5), np.zeros(5))
        np.testing.assert_allclose(out, np.zeros(5), atol=1e-12)

    def test_zero_on_consensus_shifts(self):
        scenario = hill_scenario(4, theta=0.0)
        u = pi_control_law(scenario)
        ones = np.ones(4)
        out = u(scenario.spacing + 3.0 * ones, 2.0 * ones, -1.5 * ones)
        np.testing.assert_allclose(out, np.zeros(4), atol=1e-12)

    def test_matches_affine_right_hand_side(self):
        # the simulator's affine form and the feedback closure must agree
        scenario = hill_scenario(6)
        u = pi_control_law(scenario)
        rng = np.random.default_rng(3)
        w, _ = disturbance_vector(scenario.disturbance, scenario.laplacian)
        res = simulate_formation(scenario, horizon=0.01, step=0.01)
        for _ in range(5):
            x, v, z = rng.normal(size=(3, 6))
            # acceleration from the control law plus load
            accel = u(x, v, z) + w
            L = scenario.laplacian.entries
            gains = pi_gains(scenario.pole_set)
            direct = (-gains.position * (L @ L @ (x - scenario.spacing))
                      - gains.velocity * (L @ v) - gains.integral * (L @ z) + w)
            np.testing.assert_allclose(accel, direct, rtol=1e-12, atol=1e-12)
        assert res.trajectory.forced


class TestClosedLoopSystem:
    def test_matches_assemble_blockwise(self):
        scenario = hill_scenario(5)
        sys = closed_loop_system(scenario)
        expected = np.kron(companion(scenario.pole_set).matrix,
                           scenario.laplacian.entries)
        assert inf_norm(sys.state_matrix - expected) == 0.0

    def test_single_agent_has_no_dynamics(self):
        scenario = hill_scenario(1)
        sys = closed_loop_system(scenario)
        np.testing.assert_array_equal(sys.state_matrix, np.zeros((3, 3)))
        res = simulate_formation(scenario, horizon=1.0, step=1e-2)
        assert np.abs(res.velocities - res.velocities[0]).max() <= 1e-12

    def test_two_agent_path_explicit(self):
        # hand Kronecker expansion with a_I = 1, a_p = a_v = 13/3
        scenario = hill_scenario(2)
        L = np.array([[0.0, 0.0], [-1.0, 1.0]])
        Z = np.zeros((2, 2))
        expected = np.block([
            [Z, L, Z],
            [Z, Z, L],
            [-1.0 * L, -(13.0 / 3.0) * L, -(13.0 / 3.0) * L],
        ])
        np.testing.assert_allclose(closed_loop_system(scenario).state_matrix,
                                   expected, rtol=1e-14)

    def test_physical_and_stacked_simulations_agree(self):
        scenario = hill_scenario(4)
        res = simulate_formation(scenario, horizon=5.0, step=1e-3)
        sys = closed_loop_system(scenario)
        w, _ = disturbance_vector(scenario.disturbance, scenario.laplacian)
        traj = simulate(sys, res.trajectory.states[0], sys.embed_last_block(w),
                        horizon=5.0, step=1e-3)
        assert np.abs(traj.states - res.trajectory.states).max() <= 1e-8

    def test_leader_row_is_decoupled(self):
        scenario = hill_scenario(6)
        m = closed_loop_system(scenario).state_matrix
        for block in range(3):
            np.testing.assert_array_equal(m[block * 6], np.zeros(18))

    def test_leader_trajectory_independent_of_followers(self):
        base = hill_scenario(5)
        perturbed = FormationScenario(
            laplacian=base.laplacian, pole_set=base.pole_set,
            spacing=base.spacing, v_ref=base.v_ref, disturbance=base.disturbance,
            x0=base.x0 + np.array([0.0, 3.0, -2.0, 1.0, 0.5]),
            v0=base.v0 + np.array([0.0, 1.0, 1.0, -1.0, 2.0]),
            z0=base.z0, controller="pi")
        r1 = simulate_formation(base, horizon=3.0, step=1e-3)
        r2 = simulate_formation(perturbed, horizon=3.0, step=1e-3)
        np.testing.assert_allclose(r1.positions[:, 0], r2.positions[:, 0],
                                   atol=1e-12)
        np.testing.assert_allclose(r1.velocities[:, 0], r2.velocities[:, 0],
                                   atol=1e-12)


class TestDisturbanceSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            Disturbance(kind="wind")
        with pytest.raises(ValueError, match="type"):
            Disturbance.from_json({"type": "wind"})

    def test_lw0_needs_vector(self):
        with pytest.raises(ValueError, match="w0"):
            Disturbance(kind="lw0")

    def test_json_defaults(self):
        assert Disturbance.from_json(None).kind == "none"
        hill = Disturbance.from_json({"type": "hill", "theta": 0.2})
        assert hill.gravity == 9.8 and hill.theta == 0.2


class TestDisturbanceVector:
    def test_zero_inclination_gives_zero_force(self):
        lap = path_ahead_laplacian(4)
        w, w0 = disturbance_vector(Disturbance(kind="hill", theta=0.0), lap)
        np.testing.assert_array_equal(w, np.zeros(4))

    def test_hill_magnitude(self):
        lap = path_ahead_laplacian(3)
        w, _ = disturbance_vector(Disturbance(kind="hill", theta=0.1, gravity=9.8),
                                  lap)
        magnitude = 9.8 * 0.1 / np.sqrt(1.01)
        np.testing.assert_allclose(w, [0.0, -magnitude, -magnitude], rtol=1e-15)
        assert abs(magnitude - 0.9751364464057896) < 1e-15

    def test_hill_w0_is_staircase_up_to_constant(self):
        lap = path_ahead_laplacian(3)
        w, w0 = disturbance_vector(Disturbance(kind="hill", theta=0.1), lap)
        np.testing.assert_allclose(lap.entries @ w0, w, atol=1e-12)
        # increments of the staircase are all equal to the force magnitude
        np.testing.assert_allclose(np.diff(w0), w[1] * np.ones(2), rtol=1e-10)

    def test_lw0_round_trip(self):
        lap = path_ahead_laplacian(4)
        w0 = np.array([0.0, 1.0, -2.0, 0.5])
        w, returned = disturbance_vector(Disturbance(kind="lw0", w0=tuple(w0)), lap)
        np.testing.assert_array_equal(returned, w0)
        np.testing.assert_allclose(w, lap.entries @ w0, atol=1e-15)

    def test_solve_w0_rejects_out_of_image_force(self):
        lap = path_ahead_laplacian(3)
        # the image of this Laplacian has zero first component
        with pytest.raises(NotInImageError):
            solve_w0(lap, np.array([1.0, 0.0, 0.0]))


class TestTheorem2Constants:
    def test_vandermonde_values_match_inline_oracle(self):
        ps = poles_to_coefficients([1.0, 2.0, 3.0])
        constants = theorem2_constants(ps, use_optimal=False)
        lam = np.array([-1.0, -2.0, -3.0])
        S = np.vander(lam, 3, increasing=True).T
        Si = np.linalg.inv(S)
        np.testing.assert_allclose(
            constants.alpha_xi, np.abs(S).sum(1).max() * np.abs(Si).sum(1).max(),
            rtol=1e-12)
        np.testing.assert_allclose(
            constants.alpha_w,
            (2.0 / 6.0) * np.abs(S).sum(1).max() * np.abs(Si[:, 0]).max(),
            rtol=1e-12)
        assert constants.alpha_xi == 112.0
        np.testing.assert_allclose(constants.alpha_w, 14.0, rtol=1e-12)

    def test_optimal_improves_on_vandermonde(self):
        ps = poles_to_coefficients([1.0, 2.0, 3.0])
        raw = theorem2_constants(ps, use_optimal=False)
        opt = theorem2_constants(ps, use_optimal=True)
        assert opt.alpha_xi == 65.0  # exact minimal condition number
        assert opt.alpha_w <= raw.alpha_w + 1e-12
        assert opt.alpha_w < 9.0  # local search reaches about 8.01 here
        assert opt.alpha_xi_source == "optimal-scaling"
        assert opt.alpha_w_source == "coordinate-descent"

    def test_integral_gain_prefactor_scales_with_pole_cube(self):
        base = poles_to_coefficients([1.0 / 3.0, 1.0, 3.0])
        assert base.coefficients[0] == pytest.approx(1.0)
        c = 2.0
        scaled = poles_to_coefficients([c / 3.0, c, 3.0 * c])
        np.testing.assert_allclose(scaled.coefficients[0], c ** 3, rtol=1e-12)

    def test_requires_three_poles(self):
        with pytest.raises(WrongOrderError):
            theorem2_constants(poles_to_coefficients([1.0, 2.0]))


class TestAppendixIdentities:
    def test_inverse_image_of_last_basis_vector(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            p = np.exp(rng.uniform(np.log(0.2), np.log(5.0), 3))
            if np.abs(p[:, None] - p[None, :])[~np.eye(3, dtype=bool)].min() < 1e-3:
                continue
            ps = poles_to_coefficients(p)
            a = companion(ps).matrix
            out = -np.linalg.solve(a, np.array([0.0, 0.0, 1.0]))
            np.testing.assert_allclose(out, [1.0 / ps.coefficients[0], 0.0, 0.0],
                                       atol=1e-12 / ps.coefficients[0] + 1e-13)

    def test_closed_form_solution_matches_simulation(self):
        rng = np.random.default_rng(21)
        scenario = hill_scenario(4)
        sys = closed_loop_system(scenario)
        w0 = rng.uniform(-1, 1, 4)
        xi0 = rng.uniform(-1, 1, sys.dim)
        h = 1e-3
        traj = simulate(sys, xi0, sys.structured_disturbance(w0),
                        horizon=4.0, step=h)
        a_i = scenario.pole_set.coefficients[0]
        forced_part = np.zeros(sys.dim)
        forced_part[:4] = w0 / a_i
        step_matrix = expm_oracle(sys.state_matrix, h)
        ref = xi0.copy()
        worst = 0.0
        identity = np.eye(sys.dim)
        for k in range(1, traj.times.size):
            ref = (identity - step_matrix) @ forced_part + step_matrix @ ref
            worst = max(worst, float(np.abs(traj.states[k] - ref).max()))
        assert worst <= 1e-6

    def test_integrator_state_settles_at_shifted_w0(self):
        scenario = hill_scenario(5)
        res = simulate_formation(scenario, horizon=60.0, step=2e-3,
                                 record_stride=10)
        a_i = scenario.pole_set.coefficients[0]
        shift = res.integral_states[-1] - res.w0 / a_i
        assert np.abs(shift - shift.mean()).max() <= 1e-4


class TestDisturbanceRejection:
    def test_trivial_scenario_rejects(self):
        scenario = hill_scenario(3, theta=0.0)
        res = simulate_formation(scenario, horizon=40.0, step=1e-3)
        report = check_disturbance_rejection(res)
        assert report.rejected and report.has_spanning_tree

    def test_hill_small_chain_rejects(self):
        res = simulate_formation(hill_scenario(5), horizon=60.0, step=1e-3)
        report = check_disturbance_rejection(res, tol=1e-3)
        assert report.rejected
        assert report.epos_final <= 1e-4 and report.lvel_final <= 1e-4

    def test_hill_medium_chain_rejects_given_enough_time(self):
        # settling time grows with the chain length: the slow pole's wave
        # crosses roughly three vehicles per time unit, so N=20 needs T well
        # past the 20/min(p) = 60 default
        res = simulate_formation(hill_scenario(20), horizon=120.0, step=2e-3,
                                 record_stride=10)
        report = check_disturbance_rejection(res, tol=1e-3)
        assert report.rejected

    def test_warns_without_spanning_tree(self):
        w = np.zeros((3, 3))
        w[1, 0] = 1.0  # node 2 is unreachable
        lap = laplacian_from_graph(DirectedGraph(w))
        scenario = FormationScenario(
            laplacian=lap, pole_set=poles_to_coefficients(CASE_STUDY_POLES),
            spacing=default_spacing(3), v_ref=10.0,
            disturbance=Disturbance(), x0=default_spacing(3),
            v0=np.zeros(3), z0=np.zeros(3))
        res = simulate_formation(scenario, horizon=1.0, step=1e-2)
        with pytest.warns(NoSpanningTreeWarning):
            report = check_disturbance_rejection(res)
        assert not report.has_spanning_tree


class TestSecondOrderComparison:
    def test_system_requires_two_poles(self):
        with pytest.raises(WrongOrderError):
            second_order_reference_controller(hill_scenario(3))

    def test_converges_without_disturbance(self):
        scenario = hill_scenario(5, poles=[1.0 / 3.0, 3.0], controller="pd",
                                 theta=0.0)
        res = simulate_formation(scenario, horizon=60.0, step=1e-3)
        assert np.abs(res.trajectory.e_pos[-1]).max() <= 1e-4

    def test_stationary_error_matches_linear_solve(self):
        scenario = hill_scenario(10, poles=[1.0 / 3.0, 3.0], controller="pd")
        res = simulate_formation(scenario, horizon=120.0, step=2e-3,
                                 record_stride=10)
        predicted = stationary_relative_error(scenario)
        assert np.abs(predicted).max() >= 0.1
        np.testing.assert_allclose(res.trajectory.e_pos[-1], predicted, atol=1e-4)

    def test_doubling_position_gain_halves_stationary_error(self):
        base = hill_scenario(6, poles=[1.0 / 3.0, 3.0], controller="pd")
        doubled = hill_scenario(6, poles=[2.0 / 3.0, 3.0], controller="pd")
        assert doubled.pole_set.coefficients[0] == pytest.approx(
            2.0 * base.pole_set.coefficients[0])
        np.testing.assert_allclose(stationary_relative_error(doubled),
                                   0.5 * stationary_relative_error(base),
                                   rtol=1e-10)


class TestTheorem2BoundCheck:
    def test_holds_for_random_load(self):
        rng = np.random.default_rng(19)
        scenario = hill_scenario(5)
        sys = closed_loop_system(scenario)
        w0 = rng.uniform(-1, 1, 5)
        xi0 = rng.uniform(-1, 1, sys.dim)
        traj = simulate(sys, xi0, sys.structured_disturbance(w0),
                        horizon=60.0, step=1e-3)
        constants = theorem2_constants(scenario.pole_set)
        report = theorem2_transient_bound_check(traj, constants, w0, xi0)
        assert report.holds
        assert report.lhs_sup <= report.rhs

    def test_zero_load_reduces_to_initial_condition_bound(self):
        scenario = hill_scenario(4)
        sys = closed_loop_system(scenario)
        xi0 = np.ones(sys.dim)
        traj = simulate(sys, xi0, horizon=20.0, step=1e-3)
        constants = theorem2_constants(scenario.pole_set)
        report = theorem2_transient_bound_check(traj, constants, np.zeros(4), xi0)
        assert report.rhs == pytest.approx(constants.alpha_xi)
        assert report.holds

    def test_missing_w0_raises(self):
        scenario = hill_scenario(4)
        sys = closed_loop_system(scenario)
        traj = simulate(sys, np.zeros(sys.dim), horizon=1.0, step=1e-2)
        with pytest.raises(MissingW0Error):
            theorem2_transient_bound_check(traj, theorem2_constants(scenario.pole_set),
                                           None)


class TestScenarioJson:
    def test_defaults(self):
        scenario, options = scenario_from_json({
            "n_agents": 4, "poles": CASE_STUDY_POLES,
        })
        np.testing.assert_array_equal(scenario.spacing, [0.0, -20.0, -40.0, -60.0])
        np.testing.assert_array_equal(scenario.x0, scenario.spacing)
        np.testing.assert_array_equal(scenario.v0, [10.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(scenario.z0, np.zeros(4))
        assert scenario.controller == "pi"
        assert options["horizon"] is None and options["step"] == 1e-3
        assert scenario.default_horizon() == pytest.approx(60.0)

    def test_explicit_vectors(self):
        scenario, options = scenario_from_json({
            "n_agents": 2, "poles": CASE_STUDY_POLES,
            "spacing": [0.0, -5.0], "x0": [1.0, -4.0], "v0": [2.0, 2.0],
            "z0": [0.1, 0.2], "T": 3.0, "dt": 0.01,
        })
        np.testing.assert_array_equal(scenario.x0, [1.0, -4.0])
        np.testing.assert_array_equal(scenario.v0, [2.0, 2.0])
        assert options == {"horizon": 3.0, "step": 0.01}

    def test_topology_mismatch_rejected(self):
        with pytest.raises(ValueError, match="n_agents"):
            scenario_from_json({
                "n_agents": 4, "poles": CASE_STUDY_POLES,
                "topology": {"preset": "path_ahead", "n": 3},
            })

    def test_pd_controller_pole_count(self):
        with pytest.raises(WrongOrderError):
            scenario_from_json({
                "n_agents": 3, "poles": CASE_STUDY_POLES, "controller": "pd",
            })

    def test_lw0_disturbance_length_checked(self):
        scenario, _ = scenario_from_json({
            "n_agents": 3, "poles": CASE_STUDY_POLES,
            "disturbance": {"type": "lw0", "w0": [0.0, 1.0, 2.0]},
        })
        w, w0 = disturbance_vector(scenario.disturbance, scenario.laplacian)
        np.testing.assert_allclose(w, scenario.laplacian.entries @ w0)
