"""PI-controlled vehicle formations driven by third-order serial consensus.

A network of double integrators x_i'' = u_i + w_i follows a virtual leader
at constant reference velocity. The relative-feedback PI law

    u = -a_v L x' - a_p L^2 (x - d) - a_I L z,    z' = L^2 (x - d)

places the closed-loop factors at the design poles and, unlike PD control,
rejects constant load disturbances that lie in the image of L (for example
gravity on a constant incline). The closed loop in the stacked coordinates
(z, L(x - d), x') is exactly the third-order serial consensus system, so the
transient bounds from :mod:`.dynamics` apply verbatim.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    NonFiniteStateError,
    SerialConsensusSystem,
    Trajectory,
    assemble,
)
from .graphs import (
    LaplacianMatrix,
    graph_from_json,
    graph_from_laplacian,
    has_directed_spanning_tree,
    inf_norm,
    laplacian_from_graph,
    path_ahead_laplacian,
)
from .spectra import PoleSet, poles_to_coefficients, vandermonde_diagonalization

STATE_CAP = 1e12
DEFAULT_GAP_M = 20.0
DEFAULT_V_REF = 10.0
DEFAULT_GRAVITY = 9.8
DEFAULT_REJECTION_TOL = 1e-3


class WrongOrderError(ValueError):
    """An operation needed a specific number of poles."""


class MissingW0Error(ValueError):
    """The disturbance is not available in L*w0 form."""


class NotInImageError(ValueError):
    """A force vector lies outside the column space of L."""


class NoSpanningTreeWarning(UserWarning):
    """Disturbance rejection was evaluated without a directed spanning tree."""


@dataclass(frozen=True)
class Disturbance:
    """Load disturbance specification.

    kind "none": no force. kind "hill": constant decelerating force
    -g*theta/sqrt(1+theta^2) on every non-leader agent. kind "lw0": the
    structured force w = L w0 for a given w0.
    """

    kind: str = "none"
    theta: float = 0.0
    gravity: float = DEFAULT_GRAVITY
    w0: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("none", "hill", "lw0"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "lw0" and self.w0 is None:
            raise ValueError("lw0 disturbance needs a w0 vector")

    @classmethod
    def from_json(cls, doc: dict | None) -> "Disturbance":
        if doc is None:
            return cls()
        kind = doc.get("type", "none")
        if kind == "none":
            return cls()
        if kind == "hill":
            return cls(kind="hill", theta=float(doc["theta"]),
                       gravity=float(doc.get("g", DEFAULT_GRAVITY)))
        if kind == "lw0":
            return cls(kind="lw0", w0=tuple(float(v) for v in doc["w0"]))
        raise ValueError(f"unknown disturbance type {kind!r}")


@dataclass(frozen=True)
class PiGains:
    """Controller gains tied to the poles by Vieta's formulas:
    a_v = p1+p2+p3, a_p = p1 p2 + p1 p3 + p2 p3, a_I = p1 p2 p3."""

    velocity: float
    position: float
    integral: float


@dataclass(frozen=True)
class DisturbanceConstants:
    """Constants in sup_t ||xi|| <= alpha_xi ||xi(0)|| + alpha_w ||w0||.

    alpha_xi = ||S2|| ||S2^-1|| and alpha_w = (2 / (p1 p2 p3)) ||S1||
    ||S1^-1 e1||, each for its own diagonalizing matrix; the two may be
    rescaled independently.
    """

    alpha_xi: float
    alpha_w: float
    alpha_xi_raw: float
    alpha_w_raw: float
    alpha_xi_source: str
    alpha_w_source: str


@dataclass(frozen=True)
class FormationScenario:
    """One vehicle-formation experiment: topology, poles, spacing, initial
    data, and load disturbance. ``controller`` is "pi" (third order) or
    "pd" (second order, used as the no-integral comparison)."""

    laplacian: LaplacianMatrix
    pole_set: PoleSet
    spacing: np.ndarray
    v_ref: float
    disturbance: Disturbance
    x0: np.ndarray
    v0: np.ndarray
    z0: np.ndarray
    controller: str = "pi"

    def __post_init__(self) -> None:
        N = self.laplacian.node_count
        for name in ("spacing", "x0", "v0", "z0"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (N,):
                raise ValueError(f"{name} must have length {N}, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.controller not in ("pi", "pd"):
            raise ValueError(f"unknown controller {self.controller!r}")
        expected = 3 if self.controller == "pi" else 2
        if self.pole_set.order != expected:
            raise WrongOrderError(
                f"{self.controller} controller needs {expected} poles, "
                f"got {self.pole_set.order}"
            )

    @property
    def n_agents(self) -> int:
        return self.laplacian.node_count

    @property
    def leader_mask(self) -> np.ndarray:
        return self.laplacian.leader_mask

    def default_horizon(self) -> float:
        return 20.0 / min(self.pole_set.poles)


@dataclass(frozen=True)
class FormationResult:
    """Simulated formation run: stacked-state trajectory plus the physical
    position/velocity/integrator histories on the same (strided) grid."""

    scenario: FormationScenario
    trajectory: Trajectory
    positions: np.ndarray
    velocities: np.ndarray
    integral_states: np.ndarray | None
    force: np.ndarray
    w0: np.ndarray | None


@dataclass(frozen=True)
class RejectionReport:
    epos_final: float
    lvel_final: float
    rejected: bool
    has_spanning_tree: bool
    tol: float


@dataclass(frozen=True)
class Theorem2Report:
    lhs_sup: float
    rhs: float
    holds: bool


def default_spacing(n_agents: int, gap: float = DEFAULT_GAP_M) -> np.ndarray:
    """Uniform formation offsets d_i = -(i-1)*gap behind the leader."""
    return -gap * np.arange(n_agents, dtype=float)


def pi_gains(ps: PoleSet) -> PiGains:
    if ps.order != 3:
        raise WrongOrderError(f"PI gains need exactly 3 poles, got {ps.order}")
    a0, a1, a2 = ps.coefficients
    return PiGains(velocity=a2, position=a1, integral=a0)


def pi_control_law(scenario: FormationScenario):
    """Feedback u(x, xdot, z) = -a_v L xdot - a_p L^2 (x-d) - a_I L z."""
    gains = pi_gains(scenario.pole_set)
    L = scenario.laplacian.entries
    L2 = L @ L
    d = scenario.spacing

    def control(x, xdot, z) -> np.ndarray:
        return (-gains.velocity * (L @ np.asarray(xdot, float))
                - gains.position * (L2 @ (np.asarray(x, float) - d))
                - gains.integral * (L @ np.asarray(z, float)))

    return control


def closed_loop_system(scenario: FormationScenario) -> SerialConsensusSystem:
    """Closed loop in stacked coordinates; for the PI controller the blocks
    are (z, L(x-d), xdot) and the state matrix is the companion form of the
    poles Kronecker the Laplacian."""
    return assemble(scenario.pole_set, scenario.laplacian)


def second_order_reference_controller(scenario: FormationScenario) -> SerialConsensusSystem:
    """PD comparison loop x'' = -(p1+p2) L x' - p1 p2 L^2 (x-d) + w, in the
    stacked coordinates (L(x-d), xdot). At equilibrium under a constant load
    w the stationary error satisfies p1 p2 L^2 (x-d) = w, so w != 0 in the
    image of L leaves a nonzero stationary L(x-d)."""
    if scenario.pole_set.order != 2:
        raise WrongOrderError(
            f"second-order comparison needs 2 poles, got {scenario.pole_set.order}"
        )
    return assemble(scenario.pole_set, scenario.laplacian)


def solve_w0(lap: LaplacianMatrix, force, tol: float = 1e-8) -> np.ndarray:
    """Solve L w0 = force; raises NotInImageError when no solution exists."""
    force = np.asarray(force, dtype=float)
    w0, *_ = np.linalg.lstsq(lap.entries, force, rcond=None)
    residual = inf_norm(lap.entries @ w0 - force)
    if residual > tol:
        raise NotInImageError(
            f"force is not in the column space of L (residual {residual:g})"
        )
    return w0


def disturbance_vector(spec: Disturbance, lap: LaplacianMatrix):
    """Per-agent force w and, when available, a w0 with L w0 = w.

    Hill forces act on every agent that has at least one incoming edge; the
    virtual leader (an all-zero Laplacian row) is not a physical vehicle and
    sees no gravity. For the predecessor-following path the solutions w0 form
    the staircase -(g theta / sqrt(1+theta^2)) * (1, 2, ..., N) plus any
    multiple of the all-ones vector.
    """
    N = lap.node_count
    if spec.kind == "none":
        return np.zeros(N), np.zeros(N)
    if spec.kind == "hill":
        magnitude = spec.gravity * spec.theta / np.sqrt(1.0 + spec.theta ** 2)
        w = np.where(lap.leader_mask, 0.0, -magnitude)
        try:
            w0 = solve_w0(lap, w)
        except NotInImageError:
            w0 = None
        return w, w0
    # lw0
    w0 = np.asarray(spec.w0, dtype=float)
    if w0.shape != (N,):
        raise ValueError(f"w0 must have length {N}, got shape {w0.shape}")
    return lap.entries @ w0, w0


def theorem2_constants(ps: PoleSet, use_optimal: bool = True) -> DisturbanceConstants:
    """Disturbance-rejection transient constants for a third-order pole set.

    The raw values use the Vandermonde eigenvectors. With ``use_optimal`` the
    initial-condition constant uses the exact minimal-condition-number
    rescaling, while the disturbance constant is improved by a local
    coordinate-descent search over diagonal rescalings (no closed form is
    known for that objective, so the result is a valid but possibly
    non-minimal constant).
    """
    if ps.order != 3:
        raise WrongOrderError(f"need exactly 3 poles, got {ps.order}")
    d = vandermonde_diagonalization(ps)
    abs_s = np.abs(d.S)
    abs_first_col = np.abs(d.S_inv[:, 0])
    a_i = ps.coefficients[0]

    alpha_xi_raw = inf_norm(d.S) * inf_norm(d.S_inv)
    alpha_w_raw = (2.0 / a_i) * inf_norm(d.S) * float(abs_first_col.max())
    if not use_optimal:
        return DisturbanceConstants(
            alpha_xi=alpha_xi_raw, alpha_w=alpha_w_raw,
            alpha_xi_raw=alpha_xi_raw, alpha_w_raw=alpha_w_raw,
            alpha_xi_source="vandermonde", alpha_w_source="vandermonde",
        )

    alpha_xi = inf_norm(d.S * np.sum(np.abs(d.S_inv), axis=1)[np.newaxis, :])

    def objective(k: np.ndarray) -> float:
        return float((abs_s @ k).max() * (abs_first_col / k).max())

    k = np.sum(np.abs(d.S_inv), axis=1).copy()
    best = objective(k)
    factors = (2.0, 1.25, 1.05, 1.005)
    for _ in range(200):
        improved = False
        for i in range(k.size):
            for f in factors:
                for scale in (f, 1.0 / f):
                    trial = k.copy()
                    trial[i] *= scale
                    val = objective(trial)
                    if val < best - 1e-15:
                        best, k = val, trial
                        improved = True
        if not improved:
            break
    alpha_w = (2.0 / a_i) * best

    return DisturbanceConstants(
        alpha_xi=float(alpha_xi), alpha_w=float(min(alpha_w, alpha_w_raw)),
        alpha_xi_raw=alpha_xi_raw, alpha_w_raw=alpha_w_raw,
        alpha_xi_source="optimal-scaling", alpha_w_source="coordinate-descent",
    )


def _affine_rk4(matrix, const, y0, n_steps, h, xi_map, record_stride):
    """RK4 for y' = M y + c with strided storage.

    ``xi_map(y)`` extracts the stacked consensus state from the physical
    state; its infinity norm is tracked at every fine step so sup statistics
    do not depend on the storage stride.
    """
    n_records = n_steps // record_stride + 1
    history = np.empty((n_records, y0.size))
    sup_norms = np.empty(n_records)
    history[0] = y0
    running = float(np.abs(xi_map(y0)).max())
    sup_norms[0] = running
    y = y0.copy()
    rec = 1
    for k in range(n_steps):
        k1 = matrix @ y + const
        k2 = matrix @ (y + 0.5 * h * k1) + const
        k3 = matrix @ (y + 0.5 * h * k2) + const
        k4 = matrix @ (y + h * k3) + const
        y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.abs(y) < STATE_CAP):
            raise NonFiniteStateError(f"state blew up at t={(k + 1) * h:g}")
        running = max(running, float(np.abs(xi_map(y)).max()))
        if (k + 1) % record_stride == 0:
            history[rec] = y
            sup_norms[rec] = running
            rec += 1
    return history, sup_norms


def simulate_formation(scenario: FormationScenario, horizon: float | None = None,
                       step: float = 1e-3, record_stride: int = 1) -> FormationResult:
    """Integrate the physical vehicle states and derive the stacked view.

    The physical states are (x, v, z) for the PI controller and (x, v) for
    the PD comparison; both closed loops are affine, y' = M y + c, with the
    constant c collecting the spacing offsets and the load disturbance. The
    returned trajectory holds the stacked states ((z, L(x-d), v) or
    (L(x-d), v)) together with e_pos = L(x-d) and e_vel = v - v_ref.

    ``record_stride`` thins the stored samples; sup norms are still tracked
    at every integrator step.
    """
    if horizon is None:
        horizon = scenario.default_horizon()
    if step <= 0 or horizon < step:
        raise ValueError("need step > 0 and horizon >= step")
    n_steps = int(round(horizon / step))
    if record_stride < 1 or n_steps % record_stride != 0:
        raise ValueError("record_stride must be >= 1 and divide the step count")

    N = scenario.n_agents
    L = scenario.laplacian.entries
    L2 = L @ L
    d = scenario.spacing
    w, w0 = disturbance_vector(scenario.disturbance, scenario.laplacian)
    a = scenario.pole_set.coefficients

    if scenario.controller == "pi":
        a_i, a_p, a_v = a
        matrix = np.zeros((3 * N, 3 * N))
        matrix[0:N, N:2 * N] = np.eye(N)
        matrix[N:2 * N, 0:N] = -a_p * L2
        matrix[N:2 * N, N:2 * N] = -a_v * L
        matrix[N:2 * N, 2 * N:] = -a_i * L
        matrix[2 * N:, 0:N] = L2
        const = np.concatenate([np.zeros(N), a_p * (L2 @ d) + w, -(L2 @ d)])
        y0 = np.concatenate([scenario.x0, scenario.v0, scenario.z0])

        def xi_map(y):
            return np.concatenate([y[2 * N:], L @ (y[0:N] - d), y[N:2 * N]])
    else:
        a0, a1 = a
        matrix = np.zeros((2 * N, 2 * N))
        matrix[0:N, N:] = np.eye(N)
        matrix[N:, 0:N] = -a0 * L2
        matrix[N:, N:] = -a1 * L
        const = np.concatenate([np.zeros(N), a0 * (L2 @ d) + w])
        y0 = np.concatenate([scenario.x0, scenario.v0])

        def xi_map(y):
            return np.concatenate([L @ (y[0:N] - d), y[N:]])

    history, sup_norms = _affine_rk4(matrix, const, y0, n_steps, step,
                                     xi_map, record_stride)
    times = step * record_stride * np.arange(history.shape[0])

    positions = history[:, 0:N]
    velocities = history[:, N:2 * N]
    integrals = history[:, 2 * N:] if scenario.controller == "pi" else None
    e_pos = (positions - d) @ L.T
    e_vel = velocities - scenario.v_ref
    if scenario.controller == "pi":
        states = np.hstack([integrals, e_pos, velocities])
    else:
        states = np.hstack([e_pos, velocities])

    traj = Trajectory(times=times, states=states,
                      block_count=scenario.pole_set.order,
                      sup_norms=sup_norms, forced=bool(np.any(w)),
                      e_pos=e_pos, e_vel=e_vel)
    return FormationResult(scenario=scenario, trajectory=traj,
                           positions=positions, velocities=velocities,
                           integral_states=integrals, force=w, w0=w0)


def check_disturbance_rejection(result: FormationResult,
                                tol: float = DEFAULT_REJECTION_TOL) -> RejectionReport:
    """Final-time rejection verdict: both ||L(x-d)(T)||_inf and
    ||L xdot(T)||_inf below ``tol``.

    Guaranteed (asymptotically) for the third-order loop when the load lies
    in the image of L and the graph has a directed spanning tree; without
    the spanning tree the verdict is still reported but flagged.
    """
    lap = result.scenario.laplacian
    tree = has_directed_spanning_tree(graph_from_laplacian(lap))
    if not tree:
        warnings.warn("graph has no directed spanning tree; rejection is not "
                      "guaranteed", NoSpanningTreeWarning, stacklevel=2)
    epos_final = float(np.abs(result.trajectory.e_pos[-1]).max())
    lvel_final = float(np.abs(lap.entries @ result.velocities[-1]).max())
    return RejectionReport(epos_final=epos_final, lvel_final=lvel_final,
                           rejected=bool(epos_final <= tol and lvel_final <= tol),
                           has_spanning_tree=tree, tol=tol)


def stationary_relative_error(scenario: FormationScenario) -> np.ndarray:
    """PD fixed point: the stationary L(x-d) solving p1 p2 L^2 delta = w.

    Linear-solve reference for long-horizon simulations; the answer is the
    unique solution of L y = w / (p1 p2) inside the image of L.
    """
    if scenario.pole_set.order != 2:
        raise WrongOrderError("stationary error applies to the 2-pole loop")
    L = scenario.laplacian.entries
    w, _ = disturbance_vector(scenario.disturbance, scenario.laplacian)
    a0 = scenario.pole_set.coefficients[0]
    delta, *_ = np.linalg.lstsq(L @ L, w / a0, rcond=None)
    return L @ delta


def theorem2_transient_bound_check(traj: Trajectory, constants: DisturbanceConstants,
                                   w0, xi0=None, rel_slack: float = 1e-9) -> Theorem2Report:
    """Compare the simulated sup of ||xi||_inf against
    alpha_xi ||xi(0)||_inf + alpha_w ||w0||_inf."""
    if w0 is None:
        raise MissingW0Error("disturbance is not expressible as L w0")
    initial = np.abs(np.asarray(xi0, dtype=float)).max() if xi0 is not None \
        else traj.initial_inf_norm
    w0 = np.asarray(w0, dtype=float)
    lhs = traj.sup_inf_norm
    rhs = constants.alpha_xi * initial + constants.alpha_w * float(np.abs(w0).max())
    return Theorem2Report(lhs_sup=float(lhs), rhs=float(rhs),
                          holds=bool(lhs <= rhs * (1.0 + rel_slack)))


def scenario_from_json(doc: dict):
    """Build a scenario plus run options from the JSON schema.

    Returns (scenario, options) where options has keys "horizon" (None means
    the default 20/min(p)) and "step".
    """
    n_agents = int(doc["n_agents"])
    topology = doc.get("topology")
    if topology is None:
        lap = path_ahead_laplacian(n_agents)
    else:
        if "preset" in topology and "n" not in topology:
            # a bare preset follows n_agents, which keeps sweeps over the
            # agent count to a single override
            topology = {**topology, "n": n_agents}
        lap = laplacian_from_graph(graph_from_json(topology))
    if lap.node_count != n_agents:
        raise ValueError(
            f"topology has {lap.node_count} nodes but n_agents={n_agents}"
        )

    ps = poles_to_coefficients([float(p) for p in doc["poles"]])
    v_ref = float(doc.get("v_ref", DEFAULT_V_REF))

    spacing_doc = doc.get("spacing", DEFAULT_GAP_M)
    if np.isscalar(spacing_doc):
        spacing = default_spacing(n_agents, float(spacing_doc))
    else:
        spacing = np.asarray(spacing_doc, dtype=float)

    disturbance = Disturbance.from_json(doc.get("disturbance"))
    leader = lap.leader_mask

    x0_doc = doc.get("x0", "rest")
    x0 = spacing.copy() if isinstance(x0_doc, str) and x0_doc == "rest" \
        else np.asarray(x0_doc, dtype=float)
    v0_doc = doc.get("v0", "rest")
    v0 = np.where(leader, v_ref, 0.0) if isinstance(v0_doc, str) and v0_doc == "rest" \
        else np.asarray(v0_doc, dtype=float)
    z0 = np.asarray(doc.get("z0", np.zeros(n_agents)), dtype=float)

    scenario = FormationScenario(
        laplacian=lap, pole_set=ps, spacing=spacing, v_ref=v_ref,
        disturbance=disturbance, x0=x0, v0=v0, z0=z0,
        controller=doc.get("controller", "pi"),
    )
    options = {
        "horizon": float(doc["T"]) if "T" in doc else None,
        "step": float(doc.get("dt", 1e-3)),
    }
    return scenario, options
