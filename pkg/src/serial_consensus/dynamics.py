"""Assembly and simulation of the n-th order serial consensus closed loop.

The closed loop for poles p_1..p_n and coupling Laplacian L is, in the
stacked coordinates xi = (L^{n-1} x, L^{n-2} x', ..., x^(n-1)),

    xi' = (A kron L) xi + input,

where A is the companion matrix of prod_k (s + p_k). Trajectories are
integrated with fixed-step classical RK4 and can be cross-checked against a
matrix-exponential reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .graphs import LaplacianMatrix, inf_norm, kron
from .spectra import (
    PoleSet,
    companion,
    minimal_condition_number,
    vandermonde_diagonalization,
)

STATE_CAP = 1e12


class NonFiniteStateError(RuntimeError):
    """A simulated state left the finite range (instability or step too large)."""


@dataclass(frozen=True)
class SerialConsensusSystem:
    """The assembled nN-dimensional closed loop with state matrix A kron L."""

    pole_set: PoleSet
    laplacian: LaplacianMatrix
    state_matrix: np.ndarray

    @property
    def order(self) -> int:
        return self.pole_set.order

    @property
    def n_agents(self) -> int:
        return self.laplacian.node_count

    @property
    def dim(self) -> int:
        return self.order * self.n_agents

    def embed_last_block(self, v) -> np.ndarray:
        """Lift an N-vector (reference input or raw disturbance force) into
        the last state block; all other blocks receive zero."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_agents,):
            raise ValueError(f"expected length-{self.n_agents} vector, got shape {v.shape}")
        out = np.zeros(self.dim)
        out[-self.n_agents:] = v
        return out

    def structured_disturbance(self, w0) -> np.ndarray:
        """Constant input ([0,...,0,1]^T kron L) w0, i.e. L w0 in the last block."""
        w0 = np.asarray(w0, dtype=float)
        if w0.shape != (self.n_agents,):
            raise ValueError(f"expected length-{self.n_agents} vector, got shape {w0.shape}")
        return self.embed_last_block(self.laplacian.entries @ w0)

    def x_realization(self) -> np.ndarray:
        """State matrix of the equivalent realization in plain derivative
        coordinates (x, x', ..., x^(n-1)): identity superdiagonal blocks and
        last block row (-a_0 L^n, ..., -a_{n-1} L). Read-only cross-check."""
        n, N = self.order, self.n_agents
        L = self.laplacian.entries
        out = np.zeros((n * N, n * N))
        for b in range(n - 1):
            out[b * N:(b + 1) * N, (b + 1) * N:(b + 2) * N] = np.eye(N)
        lpow = np.linalg.matrix_power
        for b, a_b in enumerate(self.pole_set.coefficients):
            out[(n - 1) * N:, b * N:(b + 1) * N] = -a_b * lpow(L, n - b)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class XiState:
    """Stacked state vector with ``block_count`` blocks of equal length."""

    vector: np.ndarray
    block_count: int
    time: float = 0.0

    def __post_init__(self) -> None:
        v = np.array(self.vector, dtype=float)
        if v.ndim != 1 or self.block_count < 1 or v.size % self.block_count != 0:
            raise ValueError(
                f"state of length {v.size} does not split into {self.block_count} blocks"
            )
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def block_size(self) -> int:
        return self.vector.size // self.block_count

    def block(self, k: int) -> np.ndarray:
        N = self.block_size
        return self.vector[k * N:(k + 1) * N]

    @classmethod
    def from_blocks(cls, blocks, time: float = 0.0) -> "XiState":
        return cls(np.concatenate([np.asarray(b, float) for b in blocks]),
                   block_count=len(blocks), time=time)


@dataclass(frozen=True)
class Trajectory:
    """Time-sampled states on a uniform grid, plus derived formation series.

    ``states[k]`` is xi(times[k]); ``sup_norms[k]`` is the running maximum of
    ||xi||_inf up to and including t_k. ``e_pos``/``e_vel`` are only present
    when the trajectory came from a vehicle-formation context.
    """

    times: np.ndarray
    states: np.ndarray
    block_count: int
    sup_norms: np.ndarray
    forced: bool = False
    e_pos: np.ndarray | None = None
    e_vel: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.times.ndim != 1 or self.states.shape[0] != self.times.size:
            raise ValueError("times and states disagree on the number of samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")

    @property
    def block_size(self) -> int:
        return self.states.shape[1] // self.block_count

    def block_series(self, k: int) -> np.ndarray:
        N = self.block_size
        return self.states[:, k * N:(k + 1) * N]

    @property
    def initial_inf_norm(self) -> float:
        return float(np.max(np.abs(self.states[0])))

    @property
    def sup_inf_norm(self) -> float:
        return float(self.sup_norms[-1])

    def write_csv(self, path, stride: int = 1) -> None:
        """CSV with header t, xi_0..xi_{nN-1} (plus epos_i/evel_i columns in
        formation context); 17 significant digits throughout."""
        if stride < 1:
            raise ValueError("stride must be >= 1")
        dim = self.states.shape[1]
        header = ["t"] + [f"xi_{i}" for i in range(dim)]
        extras = []
        if self.e_pos is not None:
            header += [f"epos_{i}" for i in range(self.e_pos.shape[1])]
            extras.append(self.e_pos)
        if self.e_vel is not None:
            header += [f"evel_{i}" for i in range(self.e_vel.shape[1])]
            extras.append(self.e_vel)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(0, self.times.size, stride):
                row = [self.times[k], *self.states[k]]
                for series in extras:
                    row.extend(series[k])
                writer.writerow([f"{v:.17g}" for v in row])


@dataclass(frozen=True)
class PerformanceBound:
    """Transient amplification bounds ||S||_inf ||S^-1||_inf.

    ``raw`` uses the unscaled Vandermonde eigenvectors; ``optimal`` the
    minimal-condition-number rescaling. ``value`` is the one selected by the
    caller, recorded in ``provenance``.
    """

    raw: float
    optimal: float
    provenance: str

    @property
    def value(self) -> float:
        return self.optimal if self.provenance == "optimal" else self.raw


@dataclass(frozen=True)
class TransientReport:
    max_ratio: float
    bound: float
    holds: bool
    degenerate: bool = False


@dataclass(frozen=True)
class PerformanceRatio:
    ratio: float
    degenerate: bool


def assemble(ps: PoleSet, lap: LaplacianMatrix) -> SerialConsensusSystem:
    """Build the closed loop with state matrix A kron L."""
    A = companion(ps).matrix
    state_matrix = kron(A, lap.entries)
    state_matrix.setflags(write=False)
    return SerialConsensusSystem(pole_set=ps, laplacian=lap, state_matrix=state_matrix)


def _as_input_function(disturbance, dim: int):
    """Normalize the disturbance argument to ``None`` or a callable t -> vector.

    Accepted forms: None; a constant length-dim vector; a callable; or a
    piecewise-constant schedule [(t_0, vec_0), (t_1, vec_1), ...] with
    vec_k active on [t_k, t_{k+1}).
    """
    if disturbance is None:
        return None
    if callable(disturbance):
        return lambda t: np.asarray(disturbance(t), dtype=float)
    if isinstance(disturbance, (list, tuple)) and disturbance and isinstance(
            disturbance[0], (list, tuple)):
        return piecewise_constant(disturbance, dim)
    vec = np.asarray(disturbance, dtype=float)
    if vec.shape != (dim,):
        raise ValueError(f"constant disturbance must have shape ({dim},), got {vec.shape}")
    if not np.any(vec):
        return None
    return lambda t: vec


def piecewise_constant(segments, dim: int):
    """Schedule of (start_time, vector) pairs, constant between switch times."""
    times = np.array([float(t) for t, _ in segments])
    if np.any(np.diff(times) <= 0):
        raise ValueError("segment start times must be strictly increasing")
    values = np.array([np.asarray(v, dtype=float) for _, v in segments])
    if values.shape[1] != dim:
        raise ValueError(f"segment vectors must have length {dim}")
    zero = np.zeros(dim)

    def fn(t: float) -> np.ndarray:
        idx = np.searchsorted(times, t, side="right") - 1
        return zero if idx < 0 else values[idx]

    return fn


def _rk4_history(matrix: np.ndarray, y0: np.ndarray, input_fn, n_steps: int,
                 h: float) -> np.ndarray:
    """Classical RK4 for y' = M y + u(t) on a uniform grid; returns the full
    (n_steps+1, dim) history. Raises NonFiniteStateError past STATE_CAP."""
    out = np.empty((n_steps + 1, y0.size))
    out[0] = y0
    y = y0.astype(float).copy()
    if input_fn is None:
        for k in range(n_steps):
            k1 = matrix @ y
            k2 = matrix @ (y + 0.5 * h * k1)
            k3 = matrix @ (y + 0.5 * h * k2)
            k4 = matrix @ (y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            if not np.all(np.abs(y) < STATE_CAP):
                raise NonFiniteStateError(f"state blew up at t={(k + 1) * h:g}")
            out[k + 1] = y
    else:
        for k in range(n_steps):
            t = k * h
            u0 = input_fn(t)
            um = input_fn(t + 0.5 * h)
            u1 = input_fn(t + h)
            k1 = matrix @ y + u0
            k2 = matrix @ (y + 0.5 * h * k1) + um
            k3 = matrix @ (y + 0.5 * h * k2) + um
            k4 = matrix @ (y + h * k3) + u1
            y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            if not np.all(np.abs(y) < STATE_CAP):
                raise NonFiniteStateError(f"state blew up at t={(k + 1) * h:g}")
            out[k + 1] = y
    return out


def simulate(sys: SerialConsensusSystem, xi0, disturbance=None, *,
             horizon: float, step: float = 1e-3) -> Trajectory:
    """Integrate xi' = (A kron L) xi + w(t) with fixed-step RK4.

    Args:
        xi0: initial state, XiState or length-nN array.
        disturbance: see :func:`_as_input_function`; constant vectors may be
            built with ``sys.embed_last_block`` or ``sys.structured_disturbance``.
        horizon: final time T >= step; the grid is t_k = k*step.
        step: RK4 step h > 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if horizon < step:
        raise ValueError("horizon must be at least one step")
    vec = xi0.vector if isinstance(xi0, XiState) else np.asarray(xi0, dtype=float)
    if vec.shape != (sys.dim,):
        raise ValueError(f"initial state must have shape ({sys.dim},), got {vec.shape}")
    input_fn = _as_input_function(disturbance, sys.dim)
    n_steps = int(round(horizon / step))
    states = _rk4_history(sys.state_matrix, vec, input_fn, n_steps, step)
    times = step * np.arange(n_steps + 1)
    sup_norms = np.maximum.accumulate(np.max(np.abs(states), axis=1))
    return Trajectory(times=times, states=states, block_count=sys.order,
                      sup_norms=sup_norms, forced=input_fn is not None)


def expm_oracle(M, t: float) -> np.ndarray:
    """Reference e^(M t) via scaling-and-squaring with a Pade core.

    Used to validate trajectories independently of the RK4 path.
    """
    M = np.asarray(M, dtype=float)
    out = scipy.linalg.expm(M * float(t))
    if not np.all(np.isfinite(out)):
        raise OverflowError(f"matrix exponential overflowed at ||Mt||={inf_norm(M) * t:g}")
    return out


def xi_from_x(sys: SerialConsensusSystem, x, derivatives=()) -> XiState:
    """Forward conversion of plain coordinates into the stacked state:
    blocks (L^{n-1} x, L^{n-2} x', ..., x^(n-1)). Missing higher derivatives
    default to zero. The reverse map is deliberately not provided (it is only
    defined up to the kernel of L^{n-1})."""
    n, N = sys.order, sys.n_agents
    L = sys.laplacian.entries
    given = [np.asarray(x, dtype=float)] + [np.asarray(d, dtype=float) for d in derivatives]
    if len(given) > n:
        raise ValueError(f"got {len(given)} coordinate blocks for an order-{n} system")
    given += [np.zeros(N)] * (n - len(given))
    blocks = []
    for k, g in enumerate(given):
        if g.shape != (N,):
            raise ValueError(f"coordinate block {k} must have length {N}")
        blocks.append(np.linalg.matrix_power(L, n - 1 - k) @ g)
    return XiState.from_blocks(blocks)


def theorem1_bound(ps: PoleSet, use_optimal: bool = True) -> PerformanceBound:
    """Transient amplification constant for the pole set.

    Raw value from the Vandermonde eigenvectors, optimal value from the
    minimal-condition-number rescaling; both are independent of the graph
    and of the number of agents.
    """
    d = vandermonde_diagonalization(ps)
    raw = inf_norm(d.S) * inf_norm(d.S_inv)
    optimal = minimal_condition_number(ps).optimal_bound
    return PerformanceBound(raw=float(raw), optimal=float(optimal),
                            provenance="optimal" if use_optimal else "vandermonde")


def verify_transient(traj: Trajectory, bound: PerformanceBound,
                     xi0=None, rel_slack: float = 1e-6) -> TransientReport:
    """Check sup_t ||xi(t)||_inf <= bound * ||xi(0)||_inf on the sampled grid.

    Only meaningful for unforced trajectories. A zero initial state makes the
    ratio degenerate and the bound holds trivially.
    """
    if traj.forced:
        raise ValueError("transient bound applies to unforced trajectories only")
    initial = np.abs(np.asarray(xi0, dtype=float)).max() if xi0 is not None \
        else traj.initial_inf_norm
    if initial == 0.0:
        return TransientReport(max_ratio=0.0, bound=bound.value, holds=True,
                               degenerate=True)
    ratio = traj.sup_inf_norm / initial
    return TransientReport(max_ratio=float(ratio), bound=bound.value,
                           holds=bool(ratio <= bound.value * (1.0 + rel_slack)))


def scalable_performance_ratio(traj: Trajectory) -> PerformanceRatio:
    """sup_t ||(e_pos, e_vel)||_inf divided by its value at t = 0."""
    if traj.e_pos is None or traj.e_vel is None:
        raise ValueError("trajectory has no formation measurements")
    stacked = np.hstack([traj.e_pos, traj.e_vel])
    norms = np.max(np.abs(stacked), axis=1)
    if norms[0] == 0.0:
        return PerformanceRatio(ratio=0.0, degenerate=True)
    return PerformanceRatio(ratio=float(norms.max() / norms[0]), degenerate=False)
