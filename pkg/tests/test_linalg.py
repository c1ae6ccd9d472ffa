import numpy as np
import pytest

from smallmass import linalg
from smallmass.errors import (
    IllConditionedWarning,
    NonFinite,
    SingularSystem,
    SpectrumOverlap,
    ToleranceNotMet,
    UnstableFriction,
)


def random_stable(rng, d, floor=0.5):
    """Random matrix whose symmetric part has smallest eigenvalue >= floor."""
    A = rng.normal(size=(d, d))
    shift = linalg.min_sym_eig(A)
    return A + (floor - min(shift, 0.0) + rng.uniform(0.0, 1.0)) * np.eye(d)


def random_psd(rng, d):
    B = rng.normal(size=(d, d))
    return B @ B.T


def lyap_residual(g, J, Q):
    return np.linalg.norm(g @ J + J @ g.T - Q) / max(np.linalg.norm(Q), 1.0)


def sylv_residual(A, B, C, Y):
    return np.linalg.norm(A @ Y - Y @ B - C) / max(np.linalg.norm(C), 1.0)


class TestExpm:
    def test_zero_matrix(self):
        assert np.allclose(linalg.expm(np.zeros((2, 2))), np.eye(2), atol=1e-15)

    def test_diagonal(self):
        E = linalg.expm(np.diag([1.0, -1.0]))
        assert np.allclose(E, np.diag([np.e, 1.0 / np.e]), rtol=1e-12)

    def test_nilpotent_series_terminates(self):
        E = linalg.expm(np.array([[0.0, 1.0], [0.0, 0.0]]))
        assert np.array_equal(E, np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_inverse_property(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            d = rng.integers(1, 7)
            M = rng.normal(size=(d, d))
            M *= 10.0 / max(np.abs(M).sum(axis=1).max(), 1e-12)
            prod = linalg.expm(M) @ linalg.expm(-M)
            assert np.linalg.norm(prod - np.eye(d)) <= 1e-10

    def test_symmetric_against_eigendecomposition(self):
        # independent oracle: e^M = V e^L V^T for symmetric M
        rng = np.random.default_rng(7)
        for norm in (1.0, 10.0, 100.0):
            M = rng.normal(size=(5, 5))
            M = 0.5 * (M + M.T)
            M *= norm / np.abs(M).sum(axis=1).max()
            lam, V = np.linalg.eigh(M)
            oracle = V @ np.diag(np.exp(lam)) @ V.T
            got = linalg.expm(M)
            assert np.linalg.norm(got - oracle) <= 1e-12 * np.linalg.norm(oracle)

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFinite):
            linalg.expm(np.array([[np.nan, 0.0], [0.0, 0.0]]))


class TestMinSymEig:
    def test_identity(self):
        assert linalg.min_sym_eig(np.eye(3)) == pytest.approx(1.0, abs=1e-10)

    def test_diagonal(self):
        assert linalg.min_sym_eig(np.diag([2.0, 3.0])) == pytest.approx(2.0, abs=1e-10)

    def test_closed_form_2x2(self):
        # symmetric part of [[1,2],[0,1]] is [[1,1],[1,1]] with eigenvalues 0, 2
        got = linalg.min_sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
        assert got == pytest.approx(0.0, abs=1e-10)

    def test_idempotent_under_symmetrization(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            M = rng.normal(size=(4, 4))
            sym = 0.5 * (M + M.T)
            assert linalg.min_sym_eig(M) == linalg.min_sym_eig(sym)


class TestDenseSolve:
    def test_identity(self):
        b = np.array([3.0, -1.0, 2.0])
        assert np.array_equal(linalg.dense_solve(np.eye(3), b), b)

    def test_diagonal(self):
        x = linalg.dense_solve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
        assert np.allclose(x, [1.0, 2.0], atol=1e-15)

    def test_singular_raises(self):
        with pytest.raises(SingularSystem):
            linalg.dense_solve(np.ones((2, 2)), np.array([1.0, 1.0]))

    def test_residual_on_random_systems(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            n = rng.integers(1, 30)
            A = rng.normal(size=(n, n)) + n * np.eye(n)
            b = rng.normal(size=n)
            x = linalg.dense_solve(A, b)
            assert np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1.0) <= 1e-12

    def test_condition_warning(self):
        A = np.diag([1.0, 1e-13])
        with pytest.warns(IllConditionedWarning):
            linalg.dense_solve(A, np.array([1.0, 1.0]))


class TestLyapunov:
    def test_scalar(self):
        J = linalg.solve_lyapunov(np.array([[2.0]]), np.array([[9.0]]))
        assert np.allclose(J, [[2.25]], atol=1e-14)

    def test_identity_friction_halves_q(self):
        rng = np.random.default_rng(5)
        Q = random_psd(rng, 4)
        J = linalg.solve_lyapunov(np.eye(4), Q)
        assert np.allclose(J, Q / 2.0, atol=1e-12)

    def test_hand_eliminated_2x2(self):
        # gamma J + J gamma^T = I with gamma = [[1,1],[0,1]] has the unique
        # symmetric solution [[0.75, -0.25], [-0.25, 0.5]] (three unknowns,
        # eliminated by hand).
        g = np.array([[1.0, 1.0], [0.0, 1.0]])
        J = linalg.solve_lyapunov(g, np.eye(2))
        assert np.allclose(J, [[0.75, -0.25], [-0.25, 0.5]], atol=1e-12)

    def test_residual_symmetry_psd_on_random_instances(self):
        rng = np.random.default_rng(13)
        for _ in range(60):
            d = int(rng.integers(1, 7))
            g = random_stable(rng, d)
            Q = random_psd(rng, d)
            J = linalg.solve_lyapunov(g, Q)
            assert lyap_residual(g, J, Q) <= 1e-10
            assert np.array_equal(J, J.T)
            assert np.linalg.eigvalsh(J)[0] >= -1e-10

    def test_unstable_raises(self):
        with pytest.raises(UnstableFriction):
            linalg.solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))


class TestSylvester:
    def test_scalar(self):
        Y = linalg.solve_sylvester(
            np.array([[-2.0]]), np.array([[3.0]]), np.array([[-5.0]])
        )
        assert np.allclose(Y, [[1.0]], atol=1e-14)

    def test_coincides_with_lyapunov(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            d = int(rng.integers(1, 6))
            g = random_stable(rng, d)
            Q = random_psd(rng, d)
            Y = linalg.solve_sylvester(-g, g.T, -Q)
            J = linalg.solve_lyapunov(g, Q)
            assert np.linalg.norm(Y - J) <= 1e-13 * max(np.linalg.norm(J), 1.0)

    def test_residual_random_d4(self):
        rng = np.random.default_rng(19)
        for _ in range(40):
            A = -random_stable(rng, 4)
            B = random_stable(rng, 4)
            C = rng.normal(size=(4, 4))
            Y = linalg.solve_sylvester(A, B, C)
            assert sylv_residual(A, B, C, Y) <= 1e-10

    def test_spectrum_overlap_raises(self):
        with pytest.raises(SpectrumOverlap):
            linalg.solve_sylvester(
                np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]])
            )


class TestQuadrature:
    def test_identity_case(self):
        J = linalg.lyapunov_by_quadrature(np.eye(2), np.eye(2), 1e-8)
        assert np.linalg.norm(J - 0.5 * np.eye(2)) <= 1e-8

    def test_scalar_case(self):
        J = linalg.lyapunov_by_quadrature(np.array([[2.0]]), np.array([[9.0]]), 1e-8)
        assert abs(J[0, 0] - 2.25) <= 1e-8

    def test_agrees_with_direct_solver(self):
        rng = np.random.default_rng(23)
        worst = 0.0
        for _ in range(50):
            d = int(rng.integers(1, 7))
            g = random_stable(rng, d)
            Q = random_psd(rng, d)
            J_quad = linalg.lyapunov_by_quadrature(g, Q, 1e-8)
            J_dir = linalg.solve_lyapunov(g, Q)
            worst = max(worst, float(np.abs(J_quad - J_dir).max()))
        assert worst <= 1e-6

    def test_sylvester_scalar(self):
        Y = linalg.sylvester_by_quadrature(
            np.array([[-2.0]]), np.array([[3.0]]), np.array([[-5.0]]), 1e-8
        )
        assert abs(Y[0, 0] - 1.0) <= 1e-8

    def test_sylvester_matches_lyapunov_case(self):
        rng = np.random.default_rng(29)
        g = random_stable(rng, 3)
        Q = random_psd(rng, 3)
        Y = linalg.sylvester_by_quadrature(-g, g.T, -Q, 1e-8)
        J = linalg.solve_lyapunov(g, Q)
        assert np.abs(Y - J).max() <= 1e-6

    def test_sylvester_agrees_with_direct(self):
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(50):
            d = int(rng.integers(1, 7))
            A = -random_stable(rng, d)
            B = random_stable(rng, d)
            C = rng.normal(size=(d, d))
            Y_quad = linalg.sylvester_by_quadrature(A, B, C, 1e-8)
            Y_dir = linalg.solve_sylvester(A, B, C)
            worst = max(worst, float(np.abs(Y_quad - Y_dir).max()))
        assert worst <= 1e-6

    def test_tolerance_not_met(self):
        # slow decay keeps the panel-to-panel difference pinned at the
        # floating point noise floor (~1e-13 here), above the requested tol
        g = np.array([[0.01]])
        with pytest.raises(ToleranceNotMet):
            linalg.lyapunov_by_quadrature(g, np.array([[1.0]]), 1e-14, max_panels=16)

    def test_unstable_raises(self):
        with pytest.raises(UnstableFriction):
            linalg.lyapunov_by_quadrature(np.zeros((2, 2)), np.eye(2), 1e-8)


class TestBatchedSolvers:
    def test_lyapunov_batch_matches_point_solver(self):
        rng = np.random.default_rng(37)
        for d in (1, 2, 3):
            gs = np.stack([random_stable(rng, d) for _ in range(8)])
            Qs = np.stack([random_psd(rng, d) for _ in range(8)])
            Js = linalg.lyapunov_batch(gs, Qs)
            for g, Q, J in zip(gs, Qs, Js):
                ref = linalg.solve_lyapunov(g, Q)
                assert np.abs(J - ref).max() <= 1e-12 * max(np.abs(ref).max(), 1.0)

    def test_sylvester_batch_matches_point_solver(self):
        rng = np.random.default_rng(41)
        for d in (1, 2, 4):
            As = np.stack([-random_stable(rng, d) for _ in range(6)])
            Bs = np.stack([random_stable(rng, d) for _ in range(6)])
            Cs = rng.normal(size=(6, d, d))
            Ys = linalg.sylvester_batch(As, Bs, Cs)
            for A, B, C, Y in zip(As, Bs, Cs, Ys):
                ref = linalg.solve_sylvester(A, B, C)
                assert np.abs(Y - ref).max() <= 1e-12 * max(np.abs(ref).max(), 1.0)
