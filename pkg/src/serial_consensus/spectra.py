"""Pole sets, companion matrices, and analytic eigendecompositions.

The closed loop built elsewhere is block-triangularized by a small n x n
companion matrix A whose eigenvalues are the negated design poles. Because
those eigenvalues are known exactly, eigenvectors are Vandermonde columns
and the inverse eigenvector matrix comes from Lagrange basis coefficients;
no general-purpose eigensolver is involved. This module also computes the
smallest infinity-norm condition number achievable by rescaling the
eigenvector columns, which is the constant governing transient growth.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass

import numpy as np

from .graphs import inf_norm

DEFAULT_DISTINCT_RTOL = 1e-9


class NonPositivePoleError(ValueError):
    """A pole was zero or negative."""


class RepeatedPoleError(ValueError):
    """Two poles coincide (within the distinctness tolerance)."""


class SingularScalingError(ArithmeticError):
    """A row of the inverse eigenvector matrix has zero absolute sum."""


class NotInverseError(ValueError):
    """The supplied pair (S, S_inv) does not multiply to the identity."""


@dataclass(frozen=True)
class PoleSet:
    """Positive, pairwise distinct poles p_1..p_n and the monic coefficients
    a_0..a_{n-1} of prod_k (s + p_k) = s^n + a_{n-1} s^{n-1} + ... + a_0."""

    poles: tuple[float, ...]
    coefficients: tuple[float, ...]
    distinct_rtol: InitVar[float] = DEFAULT_DISTINCT_RTOL

    def __post_init__(self, distinct_rtol: float) -> None:
        p = np.asarray(self.poles, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("need at least one pole")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise NonPositivePoleError(f"poles must be positive reals, got {self.poles}")
        for i in range(p.size):
            for j in range(i + 1, p.size):
                if abs(p[i] - p[j]) <= distinct_rtol * max(p[i], p[j]):
                    raise RepeatedPoleError(
                        f"poles {p[i]!r} and {p[j]!r} are not distinct "
                        f"(relative tolerance {distinct_rtol:g})"
                    )
        a = np.asarray(self.coefficients, dtype=float)
        if a.shape != (p.size,):
            raise ValueError("expected one coefficient per pole (monic leading 1 implicit)")
        # Monic polynomial must vanish at every -p_k.
        monic = np.concatenate(([1.0], a[::-1]))  # descending powers
        residual = np.max(np.abs(np.polyval(monic, -p)))
        if residual > 1e-9 * max(1.0, abs(a[0])):
            raise ValueError(
                f"coefficients do not reproduce the poles (residual {residual:g})"
            )
        object.__setattr__(self, "poles", tuple(float(v) for v in p))
        object.__setattr__(self, "coefficients", tuple(float(v) for v in a))

    @property
    def order(self) -> int:
        return len(self.poles)


@dataclass(frozen=True)
class CompanionMatrix:
    """Controllable canonical form: superdiagonal ones, last row -a_0..-a_{n-1}."""

    order: int
    matrix: np.ndarray


@dataclass(frozen=True)
class Diagonalization:
    """Eigenvector matrix S, its inverse, and the matching eigenvalues.

    Column k of S is the eigenvector for ``eigenvalues[k]``; the ordering
    follows the pole list that produced it.
    """

    S: np.ndarray
    S_inv: np.ndarray
    eigenvalues: tuple[float, ...]


@dataclass(frozen=True)
class ConditionResult:
    """Output of the minimal-condition-number computation.

    ``optimal_bound`` is min over diagonal rescalings of ||S K||_inf *
    ||K^-1 S^-1||_inf, achieved at K_ii = sum_j |S^-1|_ij, where the second
    factor is exactly 1.
    """

    optimal_bound: float
    scaling: np.ndarray      # diagonal of K
    S_opt: np.ndarray
    S_opt_inv: np.ndarray

    def to_dict(self) -> dict:
        return {
            "optimal_bound": self.optimal_bound,
            "scaling_diagonal": [float(v) for v in self.scaling],
            "s_opt": [[float(v) for v in row] for row in self.S_opt],
            "s_opt_inv": [[float(v) for v in row] for row in self.S_opt_inv],
        }


def poles_to_coefficients(poles, distinct_rtol: float = DEFAULT_DISTINCT_RTOL) -> PoleSet:
    """Expand prod_k (s + p_k) by iterated convolution (Vieta's formulas)."""
    p = np.asarray(poles, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise NonPositivePoleError(f"poles must be positive reals, got {poles}")
    coeffs = np.array([1.0])  # descending powers, leading monic term
    for pk in p:
        coeffs = np.convolve(coeffs, [1.0, pk])
    ascending = coeffs[::-1]  # a_0, a_1, ..., a_{n-1}, 1
    return PoleSet(tuple(p), tuple(ascending[:-1]), distinct_rtol=distinct_rtol)


def companion(ps: PoleSet) -> CompanionMatrix:
    """Companion matrix with eigenvalues exactly {-p_1, ..., -p_n}."""
    n = ps.order
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = 1.0
    a[n - 1, :] = -np.asarray(ps.coefficients)
    a.setflags(write=False)
    return CompanionMatrix(order=n, matrix=a)


def _lagrange_rows(nodes: np.ndarray) -> np.ndarray:
    """Row k holds ascending coefficients of the Lagrange polynomial l_k
    over ``nodes``; stacking the rows inverts the Vandermonde matrix."""
    n = nodes.size
    rows = np.empty((n, n))
    for k in range(n):
        numer = np.array([1.0])  # ascending
        denom = 1.0
        for j in range(n):
            if j == k:
                continue
            numer = np.convolve(numer, [-nodes[j], 1.0])
            denom *= nodes[k] - nodes[j]
        rows[k, :] = numer / denom
    return rows


def vandermonde_diagonalization(ps: PoleSet) -> Diagonalization:
    """Diagonalize the companion matrix analytically.

    Column k of S is (1, lam_k, lam_k^2, ..., lam_k^{n-1}) with lam_k = -p_k,
    and row k of S^-1 holds the Lagrange basis coefficients over the lam
    nodes, so S^-1 S = I holds by polynomial interpolation rather than by a
    numerical inverse.
    """
    lam = -np.asarray(ps.poles, dtype=float)
    n = lam.size
    S = np.vander(lam, n, increasing=True).T
    S_inv = _lagrange_rows(lam)

    A = companion(ps).matrix
    residual = inf_norm(A @ S - S @ np.diag(lam))
    if residual > 1e-9 * max(inf_norm(A), 1.0):
        raise ArithmeticError(f"diagonalization residual too large: {residual:g}")
    inv_residual = inf_norm(S @ S_inv - np.eye(n))
    if inv_residual > 1e-9 * inf_norm(S) * inf_norm(S_inv):
        raise ArithmeticError(f"inverse residual too large: {inv_residual:g}")

    S.setflags(write=False)
    S_inv.setflags(write=False)
    return Diagonalization(S=S, S_inv=S_inv, eigenvalues=tuple(float(v) for v in lam))


def optimal_condition(d: Diagonalization) -> ConditionResult:
    """Minimal infinity-norm condition number over diagonal rescalings.

    With K_ii = sum_j |S^-1|_ij every row of K^-1 S^-1 has absolute sum one,
    and ||S K||_inf is the smallest value of ||S'||_inf ||S'^-1||_inf over
    all matrices S' that diagonalize the same operator. Applies to any
    Diagonalization with distinct eigenvalues, not only companion forms.
    """
    k_diag = np.sum(np.abs(d.S_inv), axis=1)
    if np.any(k_diag == 0):
        raise SingularScalingError("a row of S_inv has zero absolute sum")
    S_opt = d.S * k_diag[np.newaxis, :]
    S_opt_inv = d.S_inv / k_diag[:, np.newaxis]
    bound = inf_norm(S_opt)
    return ConditionResult(
        optimal_bound=float(bound),
        scaling=k_diag,
        S_opt=S_opt,
        S_opt_inv=S_opt_inv,
    )


def condition_of(S, S_inv, tol: float = 1e-6) -> float:
    """||S||_inf * ||S^-1||_inf after checking that S_inv really inverts S."""
    S = np.asarray(S, dtype=float)
    S_inv = np.asarray(S_inv, dtype=float)
    residual = inf_norm(S @ S_inv - np.eye(S.shape[0]))
    if residual > tol:
        raise NotInverseError(f"S @ S_inv differs from I by {residual:g} (tol {tol:g})")
    return inf_norm(S) * inf_norm(S_inv)


def minimal_condition_number(ps: PoleSet) -> ConditionResult:
    """Convenience wrapper: diagonalize the companion form, then optimize."""
    return optimal_condition(vandermonde_diagonalization(ps))
