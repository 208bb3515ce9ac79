import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepdof.net_core import Network
from deepdof.spectral import (
    ConvergenceError,
    NotPSDError,
    Spectrum,
    dof,
    dof_curve,
    dof_envelope_bound,
    eigh_psd,
    feature_matrix,
    fit_decay,
    gram_matrix,
    jacobi_eigh,
    lambda_grid,
    leverage_scores,
    operator_spectrum,
    write_dof_csv,
    write_spectrum_csv,
)


def one_node(values, activation):
    # x -> node value equals x itself; output layer irrelevant
    net = Network((np.array([[1.0]]), np.array([[1.0]])), (np.zeros(1), np.zeros(1)), activation)
    return feature_matrix(net, np.array(values, dtype=float).reshape(-1, 1), 1)


def wishart(rng, n, k=None):
    A = rng.standard_normal((n, k or n))
    return A @ A.T


class TestFeatureMatrix:
    def test_identity_single_node(self):
        Phi = one_node([2.0, -2.0], "identity")
        np.testing.assert_array_equal(Phi, [[2.0], [-2.0]])
        np.testing.assert_array_equal(gram_matrix(Phi), [[4.0, -4.0], [-4.0, 4.0]])

    def test_relu_single_node(self):
        np.testing.assert_array_equal(gram_matrix(one_node([1.0, -1.0], "relu")), [[1.0, 0.0], [0.0, 0.0]])

    def test_kernel_psd(self):
        rng = np.random.default_rng(0)
        net = Network((rng.standard_normal((3, 2)), rng.standard_normal((1, 3))), (rng.standard_normal(3), np.zeros(1)))
        X = rng.uniform(-1, 1, (40, 2))
        Phi = feature_matrix(net, X, 1)
        K = gram_matrix(Phi)
        F = np.maximum(X @ net.weights[0].T + net.biases[0], 0)
        np.testing.assert_allclose(K, F @ F.T / 3, rtol=1e-13, atol=1e-14)
        assert np.linalg.eigvalsh(K).min() >= -1e-10


class TestEigh:
    @pytest.mark.parametrize("method", ["jacobi", "lapack"])
    def test_diagonal(self, method):
        spec, V = eigh_psd(np.diag([3.0, 1.0, 2.0]), method)
        np.testing.assert_allclose(spec.eigenvalues, [3, 2, 1], atol=1e-15)

    @pytest.mark.parametrize("method", ["jacobi", "lapack"])
    def test_identity(self, method):
        spec, V = eigh_psd(np.eye(4), method)
        np.testing.assert_allclose(spec.eigenvalues, np.ones(4))
        np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-14)

    @pytest.mark.parametrize("n", [1, 2, 7, 16, 33])
    def test_wishart_reconstruction(self, n):
        M = wishart(np.random.default_rng(n), n)
        spec, V = eigh_psd(M, "jacobi")
        w = spec.eigenvalues
        assert np.all(np.diff(w) <= 0)
        assert np.linalg.norm(M - V @ np.diag(w) @ V.T) <= 1e-8 * np.linalg.norm(M)
        assert np.linalg.norm(V.T @ V - np.eye(n)) <= 1e-8

    def test_jacobi_matches_lapack(self):
        M = wishart(np.random.default_rng(3), 40, 10)
        a, _ = eigh_psd(M, "jacobi")
        b, _ = eigh_psd(M, "lapack")
        np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-10 * b.eigenvalues[0])

    def test_rank_and_clamp(self):
        M = wishart(np.random.default_rng(4), 12, 3)
        spec, _ = eigh_psd(M)
        assert spec.source_rank == 3
        assert np.all(spec.eigenvalues >= 0)

    def test_not_symmetric(self):
        with pytest.raises(ValueError):
            eigh_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_not_psd(self):
        with pytest.raises(NotPSDError):
            eigh_psd(np.diag([1.0, -0.5]))

    def test_sweep_cap(self):
        with pytest.raises(ConvergenceError):
            jacobi_eigh(wishart(np.random.default_rng(5), 10), max_sweeps=1)


class TestDof:
    def test_direct_sum(self):
        assert dof([1.0, 0.5, 0.25], 0.5) == pytest.approx(2 / 3 + 1 / 2 + 1 / 3, rel=1e-15)

    def test_limits(self):
        mu = np.array([1.0, 0.3, 0.01, 0.0])
        assert dof(mu, 1e12 * mu[0]) < 1e-9 * 3
        assert dof(mu, 1e-15) == pytest.approx(3.0, rel=1e-9)

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_nonpositive_lambda(self, lam):
        with pytest.raises(ValueError):
            dof([1.0], lam)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-6, 10.0), min_size=1, max_size=30))
    def test_convex_decreasing(self, mu):
        spec = np.array(sorted(mu, reverse=True))
        lams = np.logspace(-4, 2, 40)
        N = np.array([dof(spec, lam) for lam in lams])
        assert np.all(np.diff(N) < 0)
        assert np.all(N <= spec.size + 1e-12) and np.all(N >= 0)
        # convexity on a uniform grid
        lin = np.linspace(0.01, 1.0, 30)
        Nl = np.array([dof(spec, lam) for lam in lin])
        assert np.all(Nl[:-2] - 2 * Nl[1:-1] + Nl[2:] >= -1e-12)

    def test_curve_and_grid(self):
        spec = Spectrum(np.array([1.0, 0.1, 0.0]), 2)
        grid = lambda_grid(spec, 5)
        assert grid[0] == pytest.approx(0.01) and grid[-1] == pytest.approx(10.0)
        pts = dof_curve(spec, grid)
        assert [p[0] for p in pts] == list(grid)

    def test_gram_operator_duality(self):
        rng = np.random.default_rng(6)
        for n, m in [(30, 10), (10, 30)]:
            Phi = rng.standard_normal((n, m))
            a, _ = eigh_psd(Phi @ Phi.T / n)
            b, _ = eigh_psd(Phi.T @ Phi / n)
            k = min(n, m)
            np.testing.assert_allclose(a.eigenvalues[:k], b.eigenvalues[:k], rtol=1e-8)
            np.testing.assert_allclose(operator_spectrum(Phi).eigenvalues[:k], b.eigenvalues[:k], rtol=1e-8)

    def test_envelope_bound_example(self):
        mu = np.arange(1, 10_001, dtype=float) ** -2.0
        N = dof(mu, 0.01)
        assert N == pytest.approx(15.2, abs=0.05)
        assert dof_envelope_bound(1.0, 0.5, 0.01) == pytest.approx(20.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(0.15, 0.85), st.floats(1e-4, 1.0))
    def test_envelope_bound_holds(self, a, s, lam):
        j = np.arange(1, 200_001, dtype=float)
        assert dof(a * j ** (-1 / s), lam) <= dof_envelope_bound(a, s, lam)


class TestLeverage:
    def test_orthogonal_equal_columns(self):
        Phi = np.eye(6)[:, :4] * 3.0
        lev = leverage_scores(Phi, 0.1)
        np.testing.assert_allclose(lev.q, np.full(4, 0.25), rtol=1e-12)

    def test_dominant_column(self):
        rng = np.random.default_rng(7)
        Phi = rng.standard_normal((50, 5))
        Phi /= np.linalg.norm(Phi, axis=0)
        Phi[:, 2] *= 10
        assert np.argmax(leverage_scores(Phi, 1e-3).q) == 2

    def test_trace_identity(self):
        rng = np.random.default_rng(8)
        Phi = rng.standard_normal((40, 12))
        for lam in (1e-3, 0.1, 10.0):
            lev = leverage_scores(Phi, lam)
            N = dof(operator_spectrum(Phi), lam)
            assert abs(lev.dof - N) <= 1e-8 * N
            assert lev.q.sum() == pytest.approx(1.0, rel=1e-12)

    def test_zero_matrix(self):
        lev = leverage_scores(np.zeros((5, 3)), 0.1)
        assert lev.degenerate
        np.testing.assert_array_equal(lev.q, np.full(3, 1 / 3))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        Phi = rng.standard_normal((20, 8))
        perm = rng.permutation(8)
        np.testing.assert_allclose(leverage_scores(Phi[:, perm], 0.05).q, leverage_scores(Phi, 0.05).q[perm], rtol=1e-8)


class TestFitDecay:
    def test_inverse_square(self):
        j = np.arange(1, 65, dtype=float)
        fit = fit_decay(j**-2.0)
        assert fit.s == pytest.approx(0.5, rel=0.02)
        assert fit.a == pytest.approx(1.0, rel=0.02)

    def test_amplitude_two(self):
        j = np.arange(1, 65, dtype=float)
        fit = fit_decay(2 * j**-4.0)
        assert fit.s == pytest.approx(0.25, rel=0.02)
        assert fit.a == pytest.approx(2.0, rel=0.02)

    def test_finite_rank(self):
        fit = fit_decay(np.r_[np.ones(10), np.zeros(30)])
        assert fit.finite_rank and fit.clipped
        assert fit.s == 0.01

    def test_too_few(self):
        with pytest.raises(ValueError):
            fit_decay([1.0, 0.5, 0.1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_envelope_property(self, seed):
        rng = np.random.default_rng(seed)
        j = np.arange(1, 101, dtype=float)
        mu = rng.uniform(0.1, 3) * j ** -rng.uniform(1.2, 4) * np.exp(0.3 * rng.standard_normal(100))
        mu = np.sort(mu)[::-1]
        fit = fit_decay(mu)
        assert np.all(mu <= fit.a * j ** (-1 / fit.s) * (1 + 1e-12))


class TestExport:
    def test_csv_deterministic(self, tmp_path):
        spec = Spectrum(np.array([1.0, 0.1 + 0.2]), 2)
        write_spectrum_csv(tmp_path / "a.csv", {2: spec})
        write_spectrum_csv(tmp_path / "b.csv", {2: spec})
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "layer,j,mu_j"
        assert float(rows[2].split(",")[2]) == 0.1 + 0.2
        write_dof_csv(tmp_path / "d.csv", {2: dof_curve(spec, [0.5])})
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "layer,lambda,dof"
