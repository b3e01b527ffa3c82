"""Randomized verification suites for the theoretical guarantees.

Each suite draws seeded random instances, evaluates the relevant inequality,
and reports the worst margin observed. A nonnegative worst margin means the
property held on every sampled case. The suites back the command-line
``verify`` command and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import NonFiniteStateError, expm_oracle, theorem1_bound
from .formation import theorem2_constants
from .graphs import DirectedGraph, LaplacianMatrix, laplacian_from_graph, path_ahead_laplacian
from .spectra import (
    companion,
    minimal_condition_number,
    poles_to_coefficients,
    vandermonde_diagonalization,
)

STATE_CAP = 1e12

SUITE_NAMES = ("theorem1", "theorem2", "lemma2", "contraction")


@dataclass(frozen=True)
class SuiteReport:
    """Outcome of one randomized suite.

    ``worst_margin`` is the smallest slack seen (bound minus observed value,
    suitably normalized per suite); the suite passes iff it is >= 0.
    """

    name: str
    passed: bool
    cases: int
    worst_margin: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "passed": self.passed,
            "cases": self.cases,
            "worst_margin": self.worst_margin,
            "details": self.details,
        }


def random_pole_set(rng: np.random.Generator, order: int,
                    low: float = 1.0 / 3.0, high: float = 3.0):
    """Distinct positive poles, log-uniform over [low, high]."""
    while True:
        p = np.exp(rng.uniform(np.log(low), np.log(high), order))
        gaps = np.abs(p[:, None] - p[None, :]) + np.eye(order)
        if gaps.min() > 1e-3 * p.max():
            return poles_to_coefficients(p)


def random_spanning_tree_laplacian(rng: np.random.Generator, n_nodes: int,
                                   extra_edge_prob: float = 0.2) -> LaplacianMatrix:
    """Laplacian of a random digraph that contains a directed spanning tree
    rooted at node 0 (random parents), plus optional extra random edges."""
    w = np.zeros((n_nodes, n_nodes))
    for child in range(1, n_nodes):
        parent = int(rng.integers(0, child))
        w[child, parent] = rng.uniform(0.5, 1.5)
    extra = rng.random((n_nodes, n_nodes)) < extra_edge_prob
    np.fill_diagonal(extra, False)
    weights = rng.uniform(0.5, 1.5, (n_nodes, n_nodes))
    w = np.where(extra & (w == 0), weights, w)
    return laplacian_from_graph(DirectedGraph(w))


def random_laplacian(rng: np.random.Generator, n_nodes: int,
                     density: float = 0.5) -> LaplacianMatrix:
    """Random Laplacian with no connectivity guarantee."""
    mask = rng.random((n_nodes, n_nodes)) < density
    np.fill_diagonal(mask, False)
    w = np.where(mask, rng.uniform(0.0, 2.0, (n_nodes, n_nodes)), 0.0)
    return laplacian_from_graph(DirectedGraph(w))


def _batched_sup_ratio(matrix: np.ndarray, initial: np.ndarray,
                       horizon: float, step: float,
                       const_input: np.ndarray | None = None) -> np.ndarray:
    """RK4 for a batch of initial states (columns), tracking per-column
    running sup of the infinity norm; returns sup ||y(t)||_inf per column."""
    n_steps = int(round(horizon / step))
    y = initial.astype(float).copy()
    sup = np.max(np.abs(y), axis=0)
    h = step
    for _ in range(n_steps):
        if const_input is None:
            k1 = matrix @ y
            k2 = matrix @ (y + 0.5 * h * k1)
            k3 = matrix @ (y + 0.5 * h * k2)
            k4 = matrix @ (y + h * k3)
        else:
            k1 = matrix @ y + const_input
            k2 = matrix @ (y + 0.5 * h * k1) + const_input
            k3 = matrix @ (y + 0.5 * h * k2) + const_input
            k4 = matrix @ (y + h * k3) + const_input
        y = y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.abs(y) < STATE_CAP):
            raise NonFiniteStateError("batched simulation blew up")
        sup = np.maximum(sup, np.max(np.abs(y), axis=0))
    return sup


def run_lemma2_suite(seed: int = 0, n_pole_sets: int = 50, n_scalings: int = 1000,
                     orders=(2, 3, 4, 5), rel_tol: float = 1e-9) -> SuiteReport:
    """No random diagonal rescaling may beat the claimed optimal condition
    number: min over 1000 log-uniform diagonal K of ||S K|| ||K^-1 S^-1||
    must stay above the optimum (up to rel_tol)."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    worst_case = None
    for idx in range(n_pole_sets):
        order = orders[idx % len(orders)]
        ps = random_pole_set(rng, order, low=0.1, high=10.0)
        d = vandermonde_diagonalization(ps)
        bound = minimal_condition_number(ps).optimal_bound
        abs_s = np.abs(d.S)
        row_sums = np.sum(np.abs(d.S_inv), axis=1)
        scalings = 10.0 ** rng.uniform(-2.0, 2.0, (n_scalings, order))
        values = (abs_s @ scalings.T).max(axis=0) * (row_sums / scalings).max(axis=1)
        margin = float(values.min() - bound)
        if margin < worst:
            worst = margin
            worst_case = {"poles": list(ps.poles), "bound": bound,
                          "best_random": float(values.min())}
    passed = worst >= -rel_tol
    return SuiteReport(name="lemma2", passed=bool(passed), cases=n_pole_sets,
                       worst_margin=worst, details={"worst_case": worst_case})


def run_contraction_suite(seed: int = 0, n_laplacians: int = 20,
                          max_nodes: int = 10, n_times: int = 20,
                          tol: float = 1e-9) -> SuiteReport:
    """||e^(-P kron L t)||_inf <= 1 for diagonal P > 0 and any Laplacian L,
    on a log-spaced time grid. This is the contraction step behind the
    transient bound."""
    rng = np.random.default_rng(seed)
    times = np.logspace(-3, 2, n_times)
    worst_norm = 0.0
    cases = 0
    for _ in range(n_laplacians):
        n_nodes = int(rng.integers(2, max_nodes + 1))
        lap = random_laplacian(rng, n_nodes)
        order = int(rng.integers(1, 5))
        p_diag = rng.uniform(0.1, 4.0, order)
        m = -np.kron(np.diag(p_diag), lap.entries)
        for t in times:
            norm = float(np.abs(expm_oracle(m, t)).sum(axis=1).max())
            worst_norm = max(worst_norm, norm)
            cases += 1
    margin = 1.0 + tol - worst_norm
    return SuiteReport(name="contraction", passed=bool(worst_norm <= 1.0 + tol),
                       cases=cases, worst_margin=float(margin),
                       details={"worst_norm": worst_norm})


def run_theorem1_suite(seed: int = 0, sizes=(2, 10, 40), orders=(1, 2, 3, 4),
                       n_states: int = 10, step: float = 1e-3,
                       rel_slack: float = 1e-6) -> SuiteReport:
    """Simulated transients never exceed the optimal amplification bound.

    For each graph family and order, one pole set is drawn and reused across
    all sizes, which also exercises the size-independence of the bound:
    identical poles give the identical bound for N = 2, 10, 40.
    """
    rng = np.random.default_rng(seed)
    worst = np.inf
    worst_case = None
    cases = 0
    bounds_by_case = {}
    for family in ("path_ahead", "random_tree"):
        for order in orders:
            ps = random_pole_set(rng, order)
            bound = theorem1_bound(ps, use_optimal=True).optimal
            # one pole set per (family, order): the bound is shared by every
            # network size below, which is the scalability claim being tested
            bounds_by_case[f"{family}:n={order}"] = bound
            horizon = 20.0 / min(ps.poles)
            for n_nodes in sizes:
                if family == "path_ahead":
                    lap = path_ahead_laplacian(n_nodes)
                else:
                    lap = random_spanning_tree_laplacian(rng, n_nodes)
                matrix = np.kron(companion(ps).matrix, lap.entries)
                initial = rng.uniform(-1.0, 1.0, (order * n_nodes, n_states))
                sups = _batched_sup_ratio(matrix, initial, horizon, step)
                ratios = sups / np.max(np.abs(initial), axis=0)
                margin = float(bound * (1.0 + rel_slack) - ratios.max())
                cases += n_states
                if margin < worst:
                    worst = margin
                    worst_case = {"family": family, "order": order, "n": n_nodes,
                                  "bound": bound, "max_ratio": float(ratios.max())}
    return SuiteReport(name="theorem1", passed=bool(worst >= 0.0), cases=cases,
                       worst_margin=worst,
                       details={"worst_case": worst_case,
                                "bounds_by_case": bounds_by_case})


def run_theorem2_suite(seed: int = 0, sizes=(5, 20), pairs_per_size: int = 10,
                       step: float = 1e-3, rel_slack: float = 1e-9) -> SuiteReport:
    """Forced transients stay below alpha_xi ||xi(0)|| + alpha_w ||w0|| for
    random initial states and random structured loads on the path topology."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    worst_case = None
    cases = 0
    for n_nodes in sizes:
        lap = path_ahead_laplacian(n_nodes)
        ps = random_pole_set(rng, 3)
        constants = theorem2_constants(ps, use_optimal=True)
        matrix = np.kron(companion(ps).matrix, lap.entries)
        horizon = 20.0 / min(ps.poles)
        dim = 3 * n_nodes
        initial = rng.uniform(-1.0, 1.0, (dim, pairs_per_size))
        w0 = rng.uniform(-1.0, 1.0, (n_nodes, pairs_per_size))
        inputs = np.zeros((dim, pairs_per_size))
        inputs[2 * n_nodes:, :] = lap.entries @ w0
        sups = _batched_sup_ratio(matrix, initial, horizon, step, const_input=inputs)
        rhs = (constants.alpha_xi * np.max(np.abs(initial), axis=0)
               + constants.alpha_w * np.max(np.abs(w0), axis=0))
        margin = float((rhs * (1.0 + rel_slack) - sups).min())
        cases += pairs_per_size
        if margin < worst:
            worst = margin
            worst_case = {"n": n_nodes, "poles": list(ps.poles),
                          "alpha_xi": constants.alpha_xi,
                          "alpha_w": constants.alpha_w,
                          "max_sup": float(sups.max())}
    return SuiteReport(name="theorem2", passed=bool(worst >= 0.0), cases=cases,
                       worst_margin=worst, details={"worst_case": worst_case})


def run_suite(name: str, seed: int = 0) -> SuiteReport:
    if name == "lemma2":
        return run_lemma2_suite(seed=seed)
    if name == "contraction":
        return run_contraction_suite(seed=seed)
    if name == "theorem1":
        return run_theorem1_suite(seed=seed)
    if name == "theorem2":
        return run_theorem2_suite(seed=seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITE_NAMES}")
