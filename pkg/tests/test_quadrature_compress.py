import math
import warnings

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepdof.bounds import delta1_terms, required_width
from deepdof.net_core import Network, NormBudget, make_teacher, pre_activations
from deepdof.quadrature_compress import (
    CompressionPlan,
    LayerPlan,
    compress_layer,
    compress_network,
    layer_kernels,
    plan_compression,
    sample_nodes,
    solve_beta,
)


@pytest.fixture(scope="module")
def teacher3():
    return make_teacher("kernel_two_layer", (4, 128, 128, 1), seed=0)


@pytest.fixture(scope="module")
def inputs():
    rng = np.random.default_rng(1)
    return rng.uniform(-1, 1, (1024, 4)), rng.uniform(-1, 1, (2048, 4))


@pytest.fixture(scope="module")
def kernels(teacher3, inputs):
    return layer_kernels(teacher3, inputs[0])


class TestSampleNodes:
    def test_uniform_unit_weights(self):
        s = sample_nodes(np.full(10, 0.1), 7, seed=0)
        np.testing.assert_allclose(s.w, np.ones(7), rtol=1e-15)
        assert s.ok and s.weight_mass == pytest.approx(1.0)

    def test_point_mass(self):
        q = np.zeros(5)
        q[0] = 1.0
        s = sample_nodes(q, 3, seed=0)
        np.testing.assert_array_equal(s.node_ids, [0, 0, 0])

    def test_deterministic(self):
        q = np.random.default_rng(0).dirichlet(np.ones(20))
        a, b = sample_nodes(q, 15, seed=4), sample_nodes(q, 15, seed=4)
        np.testing.assert_array_equal(a.node_ids, b.node_ids)

    def test_mean_weight_mass(self):
        # E[1 / (q_v m_teacher)] = 1 under v ~ q; no resampling, so draw the raw masses
        q = np.random.default_rng(1).dirichlet(np.ones(30) * 2)
        rng = np.random.default_rng(2)
        ids = rng.choice(30, size=(20_000, 4), p=q)
        mass = np.mean(1.0 / (q[ids] * 30), axis=1)
        assert abs(mass.mean() - 1.0) <= 3 * mass.std() / math.sqrt(mass.size)

    def test_cap_respected(self):
        q = np.random.default_rng(3).dirichlet(np.ones(50))
        s = sample_nodes(q, 40, seed=5, delta=0.1)
        assert s.ok and s.weight_mass <= 1 / 0.8

    def test_budget_exhausted(self):
        # node 0 carries weight^2 = 1/(0.45*2) > cap = 1/0.98, drawn with probability 0.45
        q = np.array([0.45, 0.55])
        for seed in range(200):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                s = sample_nodes(q, 1, seed=seed, delta=0.01, max_tries=2)
            if not s.ok:
                break
        assert not s.ok and s.tries == 2
        assert s.weight_mass == pytest.approx(1 / 0.9)

    @pytest.mark.parametrize("q", [[0.5, 0.6], [-0.1, 1.1], []])
    def test_invalid_q(self, q):
        with pytest.raises(ValueError):
            sample_nodes(q, 2, seed=0)


def cvx_beta(t, Psi, cap):
    n, m = Psi.shape
    b = cp.Variable(m)
    cp.Problem(cp.Minimize(cp.sum_squares(t - Psi @ b) / n), [cp.sum_squares(b) <= cap]).solve()
    return b.value


class TestSolveBeta:
    def test_inactive(self):
        rng = np.random.default_rng(0)
        Psi = rng.standard_normal((50, 4))
        coef = np.array([0.1, -0.2, 0.05, 0.0])
        fit = solve_beta(Psi @ coef, Psi, 1.0)
        np.testing.assert_allclose(fit.beta[0], coef, atol=1e-10)
        assert fit.multiplier[0] == 0 and not fit.active[0]

    def test_active_single_column(self):
        rng = np.random.default_rng(1)
        Psi = rng.standard_normal((60, 5))
        fit = solve_beta(1e6 * Psi[:, 2], Psi, 0.3)
        assert fit.active[0]
        assert np.sum(fit.beta[0] ** 2) == pytest.approx(0.3, rel=1e-8)
        assert np.sum(fit.beta[0] ** 2) <= 0.3 * (1 + 1e-8)
        # closed-form ridge at the reported multiplier
        nu = fit.multiplier[0]
        ridge = np.linalg.solve(Psi.T @ Psi / 60 + nu * np.eye(5), Psi.T @ (1e6 * Psi[:, 2]) / 60)
        np.testing.assert_allclose(fit.beta[0], ridge, rtol=1e-7)

    def test_zero_targets(self):
        Psi = np.random.default_rng(2).standard_normal((10, 3))
        np.testing.assert_array_equal(solve_beta(np.zeros((10, 2)), Psi, 1.0).beta, np.zeros((2, 3)))

    def test_rank_deficient(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((30, 2))
        Psi = np.column_stack([A, A[:, 0]])
        fit = solve_beta(A @ [1.0, 2.0], Psi, 100.0)
        assert np.all(np.isfinite(fit.beta))
        np.testing.assert_allclose(Psi @ fit.beta[0], A @ [1.0, 2.0], atol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
    def test_matches_convex_solver(self, seed, cap):
        rng = np.random.default_rng(seed)
        Psi = rng.standard_normal((40, 6))
        t = rng.standard_normal(40) * 3
        ours = solve_beta(t, Psi, cap).beta[0]
        ref = cvx_beta(t, Psi, cap)
        obj = lambda b: np.mean((t - Psi @ b) ** 2)  # noqa: E731
        assert np.sum(ours**2) <= cap * (1 + 1e-8)
        assert obj(ours) <= obj(ref) + 1e-6 * max(1.0, obj(ref))


class TestCompressLayer:
    def test_identity_activation_exact_span(self):
        rng = np.random.default_rng(4)
        # teacher layer 2 has rank 3: layer-1 outputs span a 3-dim space
        W1 = np.zeros((6, 3))
        W1[:3] = rng.standard_normal((3, 3))
        W1[3:] = W1[:3] @ rng.standard_normal((3, 3)) * 0.1
        teacher = Network((W1 * 0.2, rng.standard_normal((1, 6)) * 0.1), (np.zeros(6), np.zeros(1)), "identity")
        X = rng.uniform(-1, 1, (200, 3))
        plan = CompressionPlan(0.1, {2: LayerPlan(2, 0.01, 3, 3.0, np.array([0, 1, 2]), np.ones(3), 1.0, True)})
        fit = compress_layer(teacher, 2, plan, X)
        Psi = pre_activations(teacher, X, 1)[:, :3] / math.sqrt(3)
        err = np.mean((pre_activations(teacher, X, 2)[:, 0] - math.sqrt(3) * Psi @ fit.beta[0]) ** 2)
        assert err <= 1e-10

    def test_scaling_formula(self, teacher3, inputs):
        X, _ = inputs
        m2, m3 = 20, 10
        plan = CompressionPlan(0.1, {
            2: LayerPlan(2, 0.01, m2, 1.0, np.arange(m2), np.ones(m2), 1.0, True),
            3: LayerPlan(3, 0.01, m3, 1.0, np.arange(m3) * 3, np.ones(m3), 1.0, True),
        })
        fit = compress_layer(teacher3, 2, plan, X)
        np.testing.assert_allclose(fit.W, math.sqrt(m2 / m3) * fit.beta, rtol=1e-15)
        assert np.linalg.norm(fit.W) == pytest.approx(math.sqrt(m2 / m3) * np.linalg.norm(fit.beta), rel=1e-14)
        np.testing.assert_allclose(fit.b, teacher3.biases[1][np.arange(m3) * 3] / math.sqrt(m3))

    def test_last_layer_single_row(self, teacher3, inputs):
        X, _ = inputs
        plan = plan_compression(teacher3, X, widths=[12, 7], seed=0)
        assert compress_layer(teacher3, 3, plan, X).W.shape == (1, 7)

    def test_missing_plan(self, teacher3, inputs):
        with pytest.raises(ValueError):
            compress_layer(teacher3, 2, CompressionPlan(0.1, {}), inputs[0])


class TestCompressNetwork:
    def test_identity_compression(self, teacher3, inputs):
        X, Xe = inputs
        _, rep = compress_network(teacher3, X, Xe, widths=[128, 128], sampling="all")
        assert rep.end_to_end_sq <= 1e-8

    def test_lambda_sets_widths(self, teacher3, inputs):
        X, Xe = inputs
        net, rep = compress_network(teacher3, X, Xe, lambdas=[0.01, 0.01], seed=1)
        for r in rep.layers:
            assert r.m == required_width(r.dof, 0.1)
        assert net.widths == (4, rep.layers[0].m, rep.layers[1].m, 1)

    def test_err_bound_column(self, teacher3, inputs):
        X, Xe = inputs
        _, rep = compress_network(teacher3, X, Xe, lambdas=[0.02, 0.005], seed=1)
        terms = delta1_terms([0.02, 0.005], 1.0, 4 / 0.9, 3)
        assert [r.err_bound for r in rep.layers] == terms
        assert rep.predicted_bound == pytest.approx(sum(terms))

    def test_telescoping_and_audit(self, teacher3, inputs, kernels):
        X, Xe = inputs
        for seed in range(5):
            _, rep = compress_network(teacher3, X, Xe, widths=[8, 4], seed=seed, kernels=kernels)
            assert rep.end_to_end <= rep.telescoped_bound + 1e-6
            assert rep.audit_ok
            assert all(r.err_emp >= 0 and r.err_nodesup >= r.err_emp - 1e-15 for r in rep.layers)

    def test_deterministic(self, teacher3, inputs):
        X, Xe = inputs
        a = compress_network(teacher3, X, Xe, widths=[16, 8], seed=3)[1].to_json()
        b = compress_network(teacher3, X, Xe, widths=[16, 8], seed=3)[1].to_json()
        assert a == b

    def test_width_monotone_median(self, teacher3, inputs, kernels):
        X, Xe = inputs
        meds = []
        for m in (4, 8, 16, 32, 64):
            errs = [compress_network(teacher3, X, Xe, widths=[m, m], seed=s, kernels=kernels)[1].end_to_end_sq for s in range(7)]
            meds.append(np.median(errs))
        assert np.all(np.diff(meds) <= 0)

    def test_halving_lambda(self, teacher3, inputs, kernels):
        X, Xe = inputs
        prev = None
        for lam in (0.04, 0.02, 0.01, 0.005):
            med = np.median([
                compress_network(teacher3, X, Xe, lambdas=[lam, lam], seed=s, kernels=kernels)[1].layers[0].err_emp
                for s in range(20)
            ])
            assert prev is None or med <= prev
            prev = med

    def test_report_exports(self, teacher3, inputs, tmp_path):
        X, Xe = inputs
        _, rep = compress_network(teacher3, X, Xe, widths=[8, 4], seed=0)
        rep.write_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "layer,lambda,m,err_emp,err_bound" and len(lines) == 3
        assert '"format": "deepdof.compression_report/1"' in rep.to_json()

    def test_targets_required(self, teacher3, inputs):
        with pytest.raises(ValueError):
            plan_compression(teacher3, inputs[0])
        with pytest.raises(ValueError):
            plan_compression(teacher3, inputs[0], widths=[4])
