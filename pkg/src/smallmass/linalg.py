"""Dense matrix kernels for small systems.

Matrix exponential, smallest eigenvalue of the symmetric part, Lyapunov and
Sylvester solvers through the vectorized d^2 x d^2 linear system, and
quadrature evaluations of the corresponding semigroup integral
representations.  Everything here is written for the d <= 64 regime; the
solvers are O(d^6) and deliberately simple.

All functions are pure; none keeps state.
"""

from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np

from .errors import (
    IllConditionedWarning,
    NonFinite,
    SingularSystem,
    SpectrumOverlap,
    ToleranceNotMet,
    UnstableFriction,
    ValidationError,
)

# Smallest admissible eigenvalue of the symmetric part of a friction matrix.
STABILITY_EPS = 1e-12

_TAYLOR_TERMS = 16
_TAYLOR_RADIUS = 0.25
_PIVOT_RTOL = 1e-14
_PIVOT_RATIO_WARN = 1e12


def _as_square(M, name: str = "matrix") -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return A


def _as_vector(b, n: int, name: str = "b") -> np.ndarray:
    v = np.asarray(b, dtype=float)
    if v.shape != (n,):
        raise ValidationError(f"{name} must have shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return v


def expm(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a truncated series.

    The argument is scaled below norm 1/4, a 16-term Taylor polynomial is
    evaluated in Horner form, and the result is squared back up.
    """
    A = _as_square(M, "M")
    d = A.shape[0]
    if d == 1:
        return np.exp(A)
    norm = float(np.abs(A).sum(axis=1).max())
    squarings = 0
    if norm > _TAYLOR_RADIUS:
        squarings = int(np.ceil(np.log2(norm / _TAYLOR_RADIUS)))
        A = A / (2.0 ** squarings)
    ident = np.eye(d)
    E = ident.copy()
    for j in range(_TAYLOR_TERMS, 0, -1):
        E = ident + (A @ E) / j
    for _ in range(squarings):
        E = E @ E
    return E


def min_sym_eig(M) -> float:
    """Smallest eigenvalue of the symmetric part (M + M^T)/2."""
    A = _as_square(M, "M")
    sym = 0.5 * (A + A.T)
    return float(np.linalg.eigvalsh(sym)[0])


def dense_solve(A, b) -> np.ndarray:
    """Solve A x = b by Gaussian elimination with partial pivoting.

    Raises SingularSystem when a pivot falls below 1e-14 * max|A|, and warns
    with IllConditionedWarning when the pivot-magnitude ratio exceeds 1e12.
    """
    U = _as_square(A, "A").copy()
    n = U.shape[0]
    y = _as_vector(b, n).copy()
    scale = float(np.abs(U).max())
    if scale == 0.0:
        raise SingularSystem("coefficient matrix is zero")
    threshold = _PIVOT_RTOL * scale
    piv_hi = 0.0
    piv_lo = np.inf
    for k in range(n):
        p = k + int(np.argmax(np.abs(U[k:, k])))
        piv = U[p, k]
        apiv = abs(piv)
        if apiv < threshold:
            raise SingularSystem(
                f"pivot {apiv:.3e} below threshold {threshold:.3e} in column {k}"
            )
        if p != k:
            U[[k, p]] = U[[p, k]]
            y[[k, p]] = y[[p, k]]
        piv_hi = max(piv_hi, apiv)
        piv_lo = min(piv_lo, apiv)
        if k + 1 < n:
            mult = U[k + 1:, k] / piv
            U[k + 1:, k + 1:] -= mult[:, None] * U[k, k + 1:]
            y[k + 1:] -= mult * y[k]
    if piv_hi / piv_lo > _PIVOT_RATIO_WARN:
        warnings.warn(
            f"pivot ratio {piv_hi / piv_lo:.3e} exceeds {_PIVOT_RATIO_WARN:.0e}",
            IllConditionedWarning,
            stacklevel=2,
        )
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        x[k] = (y[k] - U[k, k + 1:] @ x[k + 1:]) / U[k, k]
    return x


def _check_same_dim(*mats: np.ndarray) -> int:
    d = mats[0].shape[0]
    for m in mats[1:]:
        if m.shape[0] != d:
            raise ValidationError("operands must share one dimension")
    return d


def _is_symmetric(Q: np.ndarray) -> bool:
    scale = max(1.0, float(np.abs(Q).max()))
    return float(np.abs(Q - Q.T).max()) <= 1e-12 * scale


def solve_lyapunov(gamma, Q) -> np.ndarray:
    """Solve gamma J + J gamma^T = Q through the vectorized system.

    Requires the symmetric part of gamma to be positive definite; the result
    is symmetrized when Q is symmetric.
    """
    g = _as_square(gamma, "gamma")
    Qm = _as_square(Q, "Q")
    d = _check_same_dim(g, Qm)
    if min_sym_eig(g) <= STABILITY_EPS:
        raise UnstableFriction("symmetric part of gamma is not positive definite")
    ident = np.eye(d)
    M = np.kron(g, ident) + np.kron(ident, g)
    J = dense_solve(M, Qm.reshape(-1)).reshape(d, d)
    if _is_symmetric(Qm):
        J = 0.5 * (J + J.T)
    return J


def solve_sylvester(A, B, C) -> np.ndarray:
    """Solve A Y - Y B = C through the vectorized system.

    The spectra of A and B must be separated by the imaginary axis: the
    symmetric parts of -A and B must both be positive definite.
    """
    Am = _as_square(A, "A")
    Bm = _as_square(B, "B")
    Cm = _as_square(C, "C")
    d = _check_same_dim(Am, Bm, Cm)
    if min_sym_eig(-Am) <= STABILITY_EPS or min_sym_eig(Bm) <= STABILITY_EPS:
        raise SpectrumOverlap(
            "require sym(-A) and sym(B) positive definite for a unique solution"
        )
    ident = np.eye(d)
    M = np.kron(Am, ident) - np.kron(ident, Bm.T)
    return dense_solve(M, Cm.reshape(-1)).reshape(d, d)


@lru_cache(maxsize=8)
def _gauss_nodes(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def _panel_quadrature(integrand, upper: float, panels: int, order: int, shape) -> np.ndarray:
    nodes, weights = _gauss_nodes(order)
    edges = np.linspace(0.0, upper, panels + 1)
    total = np.zeros(shape)
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        for t, w in zip(nodes, weights):
            total += (half * w) * integrand(mid + half * t)
    return total


def _refine_quadrature(integrand, upper, tol, shape, max_panels, order=12):
    panels = 4
    prev = _panel_quadrature(integrand, upper, panels, order, shape)
    while panels <= max_panels:
        panels *= 2
        cur = _panel_quadrature(integrand, upper, panels, order, shape)
        if np.linalg.norm(cur - prev) <= tol:
            return cur
        prev = cur
    raise ToleranceNotMet(
        f"panel refinement stalled at {panels} panels without reaching {tol:.1e}"
    )


def lyapunov_by_quadrature(gamma, Q, tol: float, max_panels: int = 1024) -> np.ndarray:
    """Evaluate J = int_0^inf e^{-gamma y} Q e^{-gamma^T y} dy numerically.

    The improper integral is truncated at Y* = ln(|Q| / (tol c)) / (2c) with
    c the smallest symmetric-part eigenvalue of gamma (the semigroup decays
    like e^{-cy}), then composite fixed-order Gauss panels are doubled until
    two refinements differ by at most ``tol``.
    """
    g = _as_square(gamma, "gamma")
    Qm = _as_square(Q, "Q")
    d = _check_same_dim(g, Qm)
    c = min_sym_eig(g)
    if c <= STABILITY_EPS:
        raise UnstableFriction("symmetric part of gamma is not positive definite")
    qnorm = float(np.linalg.norm(Qm))
    if qnorm == 0.0:
        return np.zeros((d, d))
    upper = max(np.log(qnorm / (tol * c)) / (2.0 * c), 1e-2 / c)

    def integrand(y: float) -> np.ndarray:
        E = expm(-g * y)
        return E @ Qm @ E.T

    J = _refine_quadrature(integrand, upper, tol, (d, d), max_panels)
    if _is_symmetric(Qm):
        J = 0.5 * (J + J.T)
    return J


def sylvester_by_quadrature(A, B, C, tol: float, max_panels: int = 1024) -> np.ndarray:
    """Evaluate Y = -int_0^inf e^{A y} C e^{-B y} dy numerically.

    Truncation uses the decay rate c = min(min_sym_eig(-A), min_sym_eig(B));
    panel refinement as in ``lyapunov_by_quadrature``.
    """
    Am = _as_square(A, "A")
    Bm = _as_square(B, "B")
    Cm = _as_square(C, "C")
    d = _check_same_dim(Am, Bm, Cm)
    c = min(min_sym_eig(-Am), min_sym_eig(Bm))
    if c <= STABILITY_EPS:
        raise SpectrumOverlap(
            "require sym(-A) and sym(B) positive definite for a convergent integral"
        )
    cnorm = float(np.linalg.norm(Cm))
    if cnorm == 0.0:
        return np.zeros((d, d))
    upper = max(np.log(cnorm / (tol * c)) / (2.0 * c), 1e-2 / c)

    def integrand(y: float) -> np.ndarray:
        return expm(Am * y) @ Cm @ expm(-Bm * y)

    return -_refine_quadrature(integrand, upper, tol, (d, d), max_panels)


# --- stacked variants used by the ensemble drift evaluation ------------------
#
# These solve many small Lyapunov/Sylvester instances at once through the same
# vectorized formulation, but with LAPACK's batched solver (plain division for
# d = 1).  Callers are expected to have checked stability already; agreement
# with the point solvers above is pinned by tests.

def _kron_last(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    p, q = A.shape[-2:]
    r, s = B.shape[-2:]
    out = A[..., :, None, :, None] * B[..., None, :, None, :]
    return out.reshape(*A.shape[:-2], p * r, q * s)


def lyapunov_batch(gammas: np.ndarray, Qs: np.ndarray) -> np.ndarray:
    """Solve gamma J + J gamma^T = Q for stacks of matrices (..., d, d)."""
    d = gammas.shape[-1]
    if d == 1:
        return Qs / (2.0 * gammas)
    ident = np.broadcast_to(np.eye(d), gammas.shape)
    M = _kron_last(gammas, ident) + _kron_last(ident, gammas)
    rhs = Qs.reshape(*Qs.shape[:-2], d * d, 1)
    sol = np.linalg.solve(M, rhs)
    return sol.reshape(Qs.shape)


def sylvester_batch(As: np.ndarray, Bs: np.ndarray, Cs: np.ndarray) -> np.ndarray:
    """Solve A Y - Y B = C for stacks of matrices (..., d, d)."""
    d = As.shape[-1]
    if d == 1:
        return Cs / (As - Bs)
    ident = np.broadcast_to(np.eye(d), As.shape)
    M = _kron_last(As, ident) - _kron_last(ident, np.swapaxes(Bs, -1, -2))
    rhs = Cs.reshape(*Cs.shape[:-2], d * d, 1)
    sol = np.linalg.solve(M, rhs)
    return sol.reshape(Cs.shape)
