import math

import numpy as np
import pytest

from sgmoe.init import CLUSTER_EXPERT_STEPS, init_from_clustering, init_perturbed_truth
from sgmoe.io import read_json
from sgmoe.mm import (
    FitOptions,
    SingularCurvatureError,
    bound_factor,
    curvatures,
    expert_lse,
    expert_lse_grad,
    expert_stats,
    fit_gradient_baseline,
    fit_mm,
    gate_lse,
    gate_lse_grad,
    gate_stats,
    loglik_gradient,
    mm_step,
    responsibilities,
    sufficient_stats,
    surrogate_gradient,
    surrogate_value,
)
from sgmoe.model import Dataset, InvalidInputError, ModelSpec, Theta, log_likelihood, reference_truth, sample_dataset

from conftest import perturb, random_data, random_spec, random_theta


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def random_simplex(rng, q):
    return rng.dirichlet(np.ones(q + 1))[:q]


class TestResponsibilities:
    def test_single_expert(self, rng):
        spec = ModelSpec(K=1, M=3, P=2, D=1)
        tau = responsibilities(random_theta(rng, spec), random_data(rng, spec, 10))
        np.testing.assert_array_equal(tau, np.ones((10, 1)))

    def test_symmetric(self, rng):
        spec = ModelSpec(K=3, M=2, P=1, D=2)
        tau = responsibilities(Theta.zeros(spec), random_data(rng, spec, 8))
        np.testing.assert_allclose(tau, np.full((8, 3), 1 / 3), atol=1e-15)

    def test_bayes_rule(self):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        gate = np.zeros(spec.gate_shape)
        gate[0, 0, 0] = math.log(4.0)  # g = [0.8, 0.2]
        theta = Theta(spec, gate, np.zeros(spec.expert_shape))
        tau = responsibilities(theta, Dataset([[0.3]], [1], 2))
        np.testing.assert_allclose(tau, [[0.8, 0.2]], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        for _ in range(30):
            spec = random_spec(rng)
            tau = responsibilities(random_theta(rng, spec, 5.0), random_data(rng, spec, 20))
            assert np.all(tau >= 0)
            np.testing.assert_allclose(tau.sum(axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            responsibilities(Theta.zeros(ModelSpec(2, 2, 2, 1)), Dataset(np.zeros((2, 1)), [1, 2], 2))


class TestStats:
    def test_gate_single_sample(self):
        data = Dataset([[2.0]], [1], 2)
        np.testing.assert_array_equal(gate_stats(np.array([[1.0, 0.0]]), data, 1).ravel(), [1.0, 2.0])

    def test_gate_zero_block(self, rng):
        spec = ModelSpec(K=3, M=2, P=1, D=1)
        data = random_data(rng, spec, 6)
        tau = np.zeros((6, 3))
        tau[:, 2] = 1.0
        np.testing.assert_array_equal(gate_stats(tau, data, 1), 0.0)

    def test_expert_reference_class(self, rng):
        data = Dataset(rng.standard_normal((5, 1)), [3] * 5, 3)
        assert np.all(expert_stats(np.ones((5, 1)), data, 1, 3) == 0)

    def test_expert_single_sample(self):
        r = expert_stats(np.ones((1, 1)), Dataset([[3.0]], [1], 2), 1, 2)
        np.testing.assert_array_equal(r.ravel(), [1.0, 3.0])

    def test_additivity(self, rng):
        for _ in range(20):
            spec = random_spec(rng)
            theta = random_theta(rng, spec)
            d1, d2 = random_data(rng, spec, 7), random_data(rng, spec, 11)
            both = sufficient_stats(theta, d1.concat(d2))
            a, b = sufficient_stats(theta, d1), sufficient_stats(theta, d2)
            np.testing.assert_allclose(both.s, a.s + b.s, atol=1e-12)
            np.testing.assert_allclose(both.r, a.r + b.r, atol=1e-12)

    def test_duplicate_sample_doubles(self, rng):
        spec = ModelSpec(K=2, M=3, P=1, D=2)
        theta = random_theta(rng, spec)
        one = random_data(rng, spec, 1)
        np.testing.assert_allclose(sufficient_stats(theta, one.concat(one)).s, 2 * sufficient_stats(theta, one).s)

    def test_each_sample_hits_one_class_block(self, rng):
        data = Dataset([[1.0]], [2], 4)
        r = expert_stats(np.array([[0.25, 0.75]]), data, 1, 4)
        assert np.count_nonzero(np.abs(r).sum(axis=2)) == 2
        assert np.all(r[:, [0, 2], :] == 0)


class TestBoundFactor:
    def test_scalar(self):
        A, A_inv = bound_factor(1)
        np.testing.assert_allclose(A, [[0.25]])
        np.testing.assert_allclose(A_inv, [[4.0]])

    @pytest.mark.parametrize("q", range(1, 7))
    def test_inverse_identity(self, q):
        A, A_inv = bound_factor(q)
        np.testing.assert_allclose(A @ A_inv, np.eye(q), atol=1e-12)
        assert np.max(np.abs(A_inv - np.linalg.inv(A))) <= 1e-10

    @pytest.mark.parametrize("q", range(1, 7))
    def test_eigenvalues(self, q):
        ev = np.sort(np.linalg.eigvalsh(bound_factor(q)[0]))
        assert ev[0] == pytest.approx(0.25)
        np.testing.assert_allclose(ev[1:], 0.75)

    @pytest.mark.parametrize("q", range(1, 7))
    def test_dominates_softmax_hessian(self, q, rng):
        A = bound_factor(q)[0]
        for _ in range(1000):
            p = random_simplex(rng, q)
            assert np.linalg.eigvalsh(A - (np.diag(p) - np.outer(p, p)))[0] >= -1e-10

    def test_zero(self):
        with pytest.raises(InvalidInputError):
            bound_factor(0)


class TestGradients:
    def test_gate_zero_params(self):
        theta = Theta.zeros(ModelSpec(K=2, M=2, P=1, D=1))
        g = gate_lse_grad(theta, Dataset([[0.0]], [1], 2))
        np.testing.assert_allclose(g.ravel(), [0.5, 0.0])

    def test_gate_empty(self):
        theta = Theta.zeros(ModelSpec(K=3, M=2, P=1, D=1))
        assert np.all(gate_lse_grad(theta, Dataset(np.zeros((0, 1)), [], 2)) == 0)

    def test_expert_zero_weights(self, rng):
        spec = ModelSpec(K=2, M=3, P=1, D=1)
        data = random_data(rng, spec, 5)
        tau = np.zeros((5, 2))
        tau[:, 0] = 1.0
        assert np.all(expert_lse_grad(random_theta(rng, spec), tau, data)[1] == 0)

    def test_expert_zero_params(self):
        theta = Theta.zeros(ModelSpec(K=1, M=2, P=1, D=1))
        g = expert_lse_grad(theta, np.ones((1, 1)), Dataset([[0.0]], [1], 2))
        np.testing.assert_allclose(g.ravel(), [0.5, 0.0])

    def test_finite_differences(self, rng):
        for _ in range(30):
            spec = random_spec(rng)
            theta = random_theta(rng, spec)
            data = random_data(rng, spec, 15)
            tau = responsibilities(theta, data)
            V = theta.expert_tensor()

            def g_of(W):
                return gate_lse(Theta.from_matrices(spec, W, V), data)

            def e_of(Vn):
                return expert_lse(Theta.from_matrices(spec, theta.gate_matrix(), Vn), tau, data)

            assert rel_err(gate_lse_grad(theta, data), central_diff(g_of, theta.gate_matrix())) <= 1e-6
            assert rel_err(expert_lse_grad(theta, tau, data), central_diff(e_of, V)) <= 1e-6

    def test_loglik_gradient(self, rng):
        for _ in range(20):
            spec = random_spec(rng)
            theta = random_theta(rng, spec)
            data = random_data(rng, spec, 15)
            gw, gv = loglik_gradient(theta, data)
            W, V = theta.gate_matrix(), theta.expert_tensor()
            fw = central_diff(lambda w: log_likelihood(Theta.from_matrices(spec, w, V), data), W)
            fv = central_diff(lambda v: log_likelihood(Theta.from_matrices(spec, W, v), data), V)
            assert rel_err(gw, fw) <= 1e-6
            assert rel_err(gv, fv) <= 1e-6


class TestSurrogate:
    def test_tangent(self, rng):
        for _ in range(30):
            spec = random_spec(rng)
            anchor = random_theta(rng, spec, 2.0)
            data = random_data(rng, spec, 30)
            assert abs(surrogate_value(anchor, anchor, data) + log_likelihood(anchor, data)) <= 1e-8

    def test_majorizes(self, rng):
        spec = ModelSpec(K=3, M=3, P=2, D=1)
        anchor = random_theta(rng, spec)
        data = random_data(rng, spec, 40)
        for _ in range(200):
            theta = perturb(rng, anchor, float(rng.choice([0.01, 0.3, 2.0])))
            assert surrogate_value(theta, anchor, data) + log_likelihood(theta, data) >= -1e-9

    def test_quadratic_along_line(self, rng):
        spec = ModelSpec(K=3, M=3, P=1, D=2)
        anchor = random_theta(rng, spec)
        data = random_data(rng, spec, 25)
        direction = random_theta(rng, spec)

        def at(t):
            return Theta(spec, anchor.gate + t * direction.gate, anchor.experts + t * direction.experts)

        ts = np.array([-1.0, 0.5, 2.0])
        vals = [surrogate_value(at(t), anchor, data) for t in ts]
        coef = np.polyfit(ts, vals, 2)
        assert np.polyval(coef, 3.5) == pytest.approx(surrogate_value(at(3.5), anchor, data), abs=1e-8 * max(1, abs(vals[0])))

    def test_gradient_matches_fd(self, rng):
        spec = ModelSpec(K=3, M=3, P=1, D=1)
        anchor = random_theta(rng, spec)
        theta = perturb(rng, anchor, 0.5)
        data = random_data(rng, spec, 20)
        gw, gv = surrogate_gradient(theta, anchor, data)
        W, V = theta.gate_matrix(), theta.expert_tensor()
        fw = central_diff(lambda w: surrogate_value(Theta.from_matrices(spec, w, V), anchor, data), W)
        fv = central_diff(lambda v: surrogate_value(Theta.from_matrices(spec, W, v), anchor, data), V)
        assert rel_err(gw, fw) <= 1e-6
        assert rel_err(gv, fv) <= 1e-6

    def test_curvature_psd(self, rng):
        spec = ModelSpec(K=3, M=3, P=2, D=1)
        theta = random_theta(rng, spec)
        curv = curvatures(theta, random_data(rng, spec, 30))
        assert np.linalg.eigvalsh(curv.xtx)[0] >= -1e-10
        assert np.linalg.eigvalsh(curv.gate_matrix())[0] >= -1e-10
        for k in range(spec.K):
            assert np.linalg.eigvalsh(curv.expert_matrix(k))[0] >= -1e-10


class TestMMStep:
    def test_exact_minimizer(self, rng):
        for _ in range(20):
            spec = random_spec(rng)
            theta = random_theta(rng, spec, 0.3)
            data = random_data(rng, spec, 60)
            new = mm_step(theta, data, FitOptions(ridge=0.0))
            gw, gv = surrogate_gradient(new, theta, data)
            stats = sufficient_stats(theta, data)
            scale = 1 + max(np.max(np.abs(stats.s), initial=0), np.max(np.abs(stats.r), initial=0))
            assert max(np.max(np.abs(gw), initial=0), np.max(np.abs(gv))) <= 1e-7 * scale

    def test_monotone(self, rng):
        for _ in range(100):
            spec = random_spec(rng)
            theta = random_theta(rng, spec, 2.0)
            data = random_data(rng, spec, 40)
            assert log_likelihood(mm_step(theta, data), data) >= log_likelihood(theta, data) - 1e-10

    def test_stationary_point_is_fixed(self):
        # uniform labels, zero parameters: the gradient of L vanishes
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        x = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        data = Dataset(x, [1, 2, 1, 2], 2)
        theta = Theta.zeros(spec)
        gw, gv = loglik_gradient(theta, data)
        assert np.max(np.abs(gw)) < 1e-12 and np.max(np.abs(gv)) < 1e-12
        new = mm_step(theta, data, FitOptions(ridge=0.0))
        np.testing.assert_allclose(new.to_vector(), theta.to_vector(), atol=1e-8)

    def test_singular_without_ridge(self):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        data = Dataset(np.ones((5, 1)), [1, 2, 1, 2, 1], 2)
        with pytest.raises(SingularCurvatureError, match="ridge"):
            mm_step(Theta.zeros(spec), data, FitOptions(ridge=0.0))

    def test_ridge_regularizes(self):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        data = Dataset(np.ones((5, 1)), [1, 2, 1, 2, 1], 2)
        new = mm_step(Theta.zeros(spec), data, FitOptions(ridge=1e-8))
        assert np.all(np.isfinite(new.to_vector()))

    def test_ridge_escalation_is_recorded(self):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        data = Dataset(np.ones((5, 1)), [1, 2, 1, 2, 1], 2)
        events = []
        new = mm_step(Theta.zeros(spec), data, FitOptions(ridge=1e-300), events)
        assert np.all(np.isfinite(new.to_vector()))
        assert events and events[0]["relative_ridge"] > 1e-300

    def test_degenerate_expert_frozen(self, rng):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        gate = np.zeros(spec.gate_shape)
        gate[0, 0, 0] = 200.0  # expert 2 receives no responsibility
        theta = Theta(spec, gate, rng.standard_normal(spec.expert_shape))
        new = mm_step(theta, random_data(rng, spec, 30))
        np.testing.assert_array_equal(new.experts[:, 1], theta.experts[:, 1])


class TestFitMM:
    def test_trace_monotone(self, rng):
        for _ in range(10):
            spec = random_spec(rng)
            data = random_data(rng, spec, 50)
            _, trace = fit_mm(random_theta(rng, spec), data, FitOptions(max_iters=100, tol=1e-12))
            assert np.min(np.diff(trace.loglik)) >= -1e-10
            assert len(trace.loglik) == trace.iters + 1

    def test_fixed_point_converges_fast(self):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        data = Dataset(np.array([[-1.0], [-1.0], [1.0], [1.0]]), [1, 2, 1, 2], 2)
        _, trace = fit_mm(Theta.zeros(spec), data)
        assert trace.converged and trace.iters <= 2

    def test_trace_json(self, rng, tmp_path):
        from sgmoe.io import write_json

        spec = ModelSpec(K=2, M=3, P=1, D=1)
        _, trace = fit_mm(random_theta(rng, spec), random_data(rng, spec, 40), FitOptions(max_iters=5))
        write_json(tmp_path / "trace.json", trace.to_dict())
        d = read_json(tmp_path / "trace.json")
        assert set(d) == {"loglik", "iters", "converged", "ridge_events"}
        assert d["loglik"] == trace.loglik

    def test_record_thetas(self, rng):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        _, trace = fit_mm(random_theta(rng, spec), random_data(rng, spec, 30), FitOptions(max_iters=4, tol=1e-14,
                                                                                          record_thetas=True))
        assert len(trace.theta_path) == trace.iters + 1

    def test_parameter_error_shrinks_with_n(self):
        truth = reference_truth()
        errs = []
        for N in (500, 20_000):
            med = []
            for seed in range(3):
                data = sample_dataset(truth, N, seed=seed)
                theta0 = init_perturbed_truth(truth, noise=1.0, seed=100 + seed)
                fit, _ = fit_mm(theta0, data, FitOptions(max_iters=300))
                med.append(np.linalg.norm(fit.to_vector() - truth.to_vector()))
            errs.append(np.median(med))
        assert errs[1] < errs[0]

    def test_options_validation(self):
        with pytest.raises(InvalidInputError):
            FitOptions(tol=0.0)
        with pytest.raises(InvalidInputError):
            FitOptions(max_iters=0)
        with pytest.raises(InvalidInputError):
            FitOptions(ridge=-1.0)


class TestGradientBaseline:
    def test_step_zero(self, rng):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        with pytest.raises(InvalidInputError):
            fit_gradient_baseline(Theta.zeros(spec), random_data(rng, spec, 5), step=0.0, iters=3)

    def test_divergence_is_contained(self, rng):
        spec = ModelSpec(K=2, M=2, P=1, D=1)
        data = random_data(rng, spec, 20)
        theta, trace = fit_gradient_baseline(Theta.zeros(spec), data, step=1e200, iters=20)
        assert np.all(np.isfinite(theta.to_vector()))
        assert all(np.isfinite(trace.loglik))

    def test_mm_beats_gradient_ascent(self):
        truth = reference_truth()
        wins = 0
        iters = 50
        for seed in range(20):
            data = sample_dataset(truth, 1000, seed=seed)
            theta0 = init_perturbed_truth(truth, noise=1.0, seed=500 + seed)
            _, gd = fit_gradient_baseline(theta0, data, step=1.0, iters=iters)
            _, mm = fit_mm(theta0, data, FitOptions(max_iters=iters, tol=1e-300))
            wins += gd.loglik[-1] <= mm.loglik[-1] + 1e-6
        assert wins >= 16


class TestInit:
    def test_identity(self):
        truth = reference_truth()
        assert init_perturbed_truth(truth, noise=0.0) == truth

    def test_extra_expert_template(self):
        theta = init_perturbed_truth(reference_truth(), noise=0.0, extra_experts=1)
        assert theta.spec.K == 3
        truth = reference_truth()
        # the true reference expert stays last, the duplicate sits in between
        np.testing.assert_allclose(theta.gate[1, :, 0], [0.0, 8.0])
        np.testing.assert_allclose(theta.experts[0, 1, :, 0], [10.0, 20.0])
        np.testing.assert_array_equal(theta.gate[0], truth.gate[0])
        np.testing.assert_array_equal(theta.experts[:, 2], truth.experts[:, 1])

    def test_deterministic(self):
        a = init_perturbed_truth(reference_truth(), noise=1.0, extra_experts=2, seed=9)
        b = init_perturbed_truth(reference_truth(), noise=1.0, extra_experts=2, seed=9)
        assert a == b

    def test_negative_noise(self):
        with pytest.raises(InvalidInputError):
            init_perturbed_truth(reference_truth(), noise=-1.0)

    def test_cluster_single_expert(self, rng):
        data = sample_dataset(reference_truth(), 300, seed=1)
        theta = init_from_clustering(data, 1, seed=0, M=2, D=1)
        assert theta.spec.K == 1
        pooled, _ = fit_mm(Theta.zeros(theta.spec), data,
                           FitOptions(max_iters=CLUSTER_EXPERT_STEPS, ridge=1e-6, tol=1e-12 * data.N))
        np.testing.assert_allclose(theta.experts, pooled.experts, atol=1e-12)

    def test_cluster_two_blobs(self):
        rng = np.random.default_rng(4)
        n = 200
        x = np.concatenate([rng.normal(-5, 0.5, (n, 1)), rng.normal(5, 0.5, (n, 1))])
        y = np.concatenate([np.where(rng.random(n) < 0.9, 1, 2), np.where(rng.random(n) < 0.9, 2, 1)])
        data = Dataset(x, y, 2)
        theta = init_from_clustering(data, 2, seed=0, M=2, D=1)
        tau = responsibilities(theta, data)
        truth = np.repeat([0, 1], n)
        hard = tau.argmax(axis=1)
        agree = max(np.mean(hard == truth), np.mean(hard != truth))
        assert agree >= 0.9

    def test_cluster_deterministic(self):
        data = sample_dataset(reference_truth(), 400, seed=2)
        a = init_from_clustering(data, 3, seed=7, M=2, D=1)
        b = init_from_clustering(data, 3, seed=7, M=2, D=1)
        assert a == b
