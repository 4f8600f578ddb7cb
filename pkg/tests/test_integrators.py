import math
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import integrate, linalg

from src.core.contractivity import canonical_metric, discrete_rate
from src.core.errors import InvalidParameterError
from src.core.integrators import (KINETIC, SCHEMES, ChainState, ChainStreams, SchemeStep, aggregate_noise,
                                  coupled_contraction_trace, coupled_step, ensemble_csv, kick, noise_covariance,
                                  ou_flow, sample_noise_block, simulate, step, strong_order_test,
                                  write_ensemble_csv)
from src.core.targets import TargetLoader, make_gaussian_target

DATA_DIR = Path(__file__).parent.parent / 'data' / 'input'


"""
Testing scenarios:
-> Noise blocks
   Covariance of (dW, I_E) against quadrature of the OU kernel; sampled and
   aggregated blocks match it within four standard errors.
    Example:

    gamma = 2, delta = 0.5
        Cov = [[0.5, F(0.5)], [F(0.5), (1 - e^-2) / 4]],  F(0.5) = (1 - e^-1) / 2

-> One deterministic step
   Without noise every scheme maps (v, x) = (0, 1) on f = H x^2 / 2 to the
   second column of its propagator M_h(H).
    Example:

    EE, gamma = 2, h = 1, c = 1, H = 1
        (v1, x1) = (-F(1), 1 - G(1)) = (-0.4323, 0.7162)

-> UBU and BUB
   U(h/2) B(h) U(h/2) and B(h/2) U(h) B(h/2) are products XY and YX, so their
   propagators share trace and determinant (det = e^{-gamma h}). On one noise
   path, B(h/2) U(h/2), then n - 1 UBU steps, then U(h/2) B(h/2) is n BUB steps.

-> Cost and the force-free limit
   One gradient per step; BUB pays one extra on its first step only. With
   c = 0 the kinetic schemes are the exact flow (E(h) v, x + F(h) v).

-> Strong order
   h = 0.4, 0.2, 0.1, 0.05, T = 2, 2000 shared Brownian paths, c = 1/L:
   EE slope ~ 1, UBU slope ~ 2 on a Gaussian and on the sample ridge-logistic
   target.

-> Synchronous coupling
   kappa = 100, c = 1/L: over 10^4 steps the per-step P-norm ratios never
   exceed sqrt(rho_h) for any contractive (scheme, h). EE at h = 2 and
   kappa = 1e9 stretches the top generalized eigenvector of (M^T P M, P).

-> Streams and files
   Each chain owns its generator, so chain k draws the same numbers whatever
   the number of chains; ensembles serialize to CSV with a chain column.
"""


def _gaussian_1d(H: float):
    return make_gaussian_target([H])


class TestNoise(unittest.TestCase):
    def test_covariance_matches_quadrature(self):
        gamma = 2.0
        for gamma_delta in (1e-4, 0.1, 1.0, 4.0):
            delta = gamma_delta / gamma
            cov = noise_covariance(gamma, delta)
            cross, _ = integrate.quad(lambda s: math.exp(-gamma * (delta - s)), 0.0, delta,
                                      epsabs=0.0, epsrel=1e-13)
            var, _ = integrate.quad(lambda s: math.exp(-2.0 * gamma * (delta - s)), 0.0, delta,
                                    epsabs=0.0, epsrel=1e-13)
            self.assertEqual(cov[0, 0], delta)
            self.assertLess(abs(cov[0, 1] - cross) / cross, 1e-12, msg=f"gamma*delta={gamma_delta}")
            self.assertLess(abs(cov[1, 1] - var) / var, 1e-12, msg=f"gamma*delta={gamma_delta}")
            self.assertEqual(cov[0, 1], cov[1, 0])

    def _assert_covariance(self, dW: np.ndarray, i_e: np.ndarray, expected: np.ndarray):
        n = dW.size
        sample = np.cov(np.vstack([dW.ravel(), i_e.ravel()]))
        for i, j in ((0, 0), (0, 1), (1, 1)):
            se = math.sqrt((expected[i, i] * expected[j, j] + expected[i, j] ** 2) / n)
            self.assertLess(abs(sample[i, j] - expected[i, j]), 4.0 * se, msg=f"entry ({i}, {j})")

    def test_sampled_covariance(self):
        rng = np.random.default_rng(5)
        gamma, delta = 2.0, 0.5
        block = sample_noise_block(gamma, delta, 1, rng, size=(200000,))
        self.assertEqual(block.dW.shape, (200000, 1))
        self._assert_covariance(block.dW, block.i_e, noise_covariance(gamma, delta))
        np.testing.assert_allclose(gamma * block.i_f, block.dW - block.i_e)

    def test_aggregated_covariance(self):
        rng = np.random.default_rng(6)
        gamma, delta = 2.0, 0.25
        blocks = [sample_noise_block(gamma, delta, 1, rng, size=(200000,)) for _ in range(4)]
        coarse = aggregate_noise(blocks)
        self.assertAlmostEqual(coarse.delta, 1.0)
        self._assert_covariance(coarse.dW, coarse.i_e, noise_covariance(gamma, 1.0))

    def test_aggregation_is_exact(self):
        rng = np.random.default_rng(7)
        gamma, delta = 2.0, 0.3
        first, second = (sample_noise_block(gamma, delta, 3, rng) for _ in range(2))
        coarse = aggregate_noise([first, second])
        np.testing.assert_allclose(coarse.dW, first.dW + second.dW)
        np.testing.assert_allclose(coarse.i_e, math.exp(-gamma * delta) * first.i_e + second.i_e)

    def test_invalid_blocks(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(InvalidParameterError):
            sample_noise_block(2.0, 0.0, 1, rng)
        with self.assertRaises(InvalidParameterError):
            aggregate_noise([])
        with self.assertRaises(InvalidParameterError):
            aggregate_noise([sample_noise_block(2.0, 0.1, 1, rng), sample_noise_block(2.0, 0.2, 1, rng)])


class TestDeterministicStep(unittest.TestCase):
    def test_ee_example(self):
        scheme = SchemeStep("EE", h=1.0, c=1.0, gamma=2.0)
        e = math.exp(-2.0)
        F, G = (1.0 - e) / 2.0, (1.0 + e) / 4.0
        np.testing.assert_allclose(scheme.propagator(1.0), [[e, -F], [F, 1.0 - G]], rtol=1e-14)
        state = step(scheme, _gaussian_1d(1.0), ChainState(x=np.array([1.0]), v=np.array([0.0])))
        self.assertAlmostEqual(float(state.v[0]), -F, places=14)
        self.assertAlmostEqual(float(state.x[0]), 1.0 - G, places=14)
        self.assertEqual(state.n, 1)

    def test_step_follows_propagator(self):
        H = 3.0
        target = _gaussian_1d(H)
        for name in ("EE", "UBU", "BUB"):
            scheme = SchemeStep(name, h=0.4, c=0.2, gamma=2.0)
            state = step(scheme, target, ChainState(x=np.array([1.0]), v=np.array([0.0])))
            np.testing.assert_allclose(state.as_vector(), scheme.propagator(H)[:, 1], rtol=1e-13, atol=1e-15,
                                       err_msg=name)
        em = SchemeStep("EM", h=0.4, c=0.2)
        state = step(em, target, ChainState(x=np.array([1.0])))
        self.assertAlmostEqual(float(state.x[0]), 1.0 - 0.4 * 0.2 * H)
        self.assertIsNone(state.v)

    def test_bub_caches_gradient(self):
        target = make_gaussian_target([1.0, 5.0])
        scheme = SchemeStep("BUB", h=0.5, c=0.2)
        state = step(scheme, target, ChainState(x=np.array([1.0, -1.0]), v=np.zeros(2)))
        np.testing.assert_allclose(state.grad, target.gradient(state.x))
        cached = step(scheme, target, state)
        fresh = step(scheme, target, ChainState(x=state.x, v=state.v))
        np.testing.assert_allclose(cached.as_vector(), fresh.as_vector(), rtol=1e-15)

    def test_ubu_and_bub_are_conjugate(self):
        for H in (0.5, 2.0, 9.0):
            ubu = SchemeStep("UBU", h=0.7, c=0.3).propagator(H)
            bub = SchemeStep("BUB", h=0.7, c=0.3).propagator(H)
            self.assertAlmostEqual(np.trace(ubu), np.trace(bub), places=13)
            self.assertAlmostEqual(np.linalg.det(ubu), math.exp(-2.0 * 0.7), places=13)
            self.assertAlmostEqual(np.linalg.det(bub), math.exp(-2.0 * 0.7), places=13)

    def test_ubu_advances_bub_from_midpoint(self):
        target = make_gaussian_target([1.0, 4.0, 9.0])
        bub = SchemeStep("BUB", h=0.3, c=0.1)
        ubu = SchemeStep("UBU", h=0.3, c=0.1)
        half, n = 0.5 * bub.h, 6
        rng = np.random.default_rng(14)
        blocks = [sample_noise_block(bub.gamma, half, 3, rng) for _ in range(2 * n)]
        x0, v0 = rng.standard_normal(3), rng.standard_normal(3)

        state = ChainState(x=x0, v=v0)
        for k in range(n):
            state = step(bub, target, state, (blocks[2 * k], blocks[2 * k + 1]))

        v, x = ou_flow(kick(v0, target.gradient(x0), bub, half), x0, bub, half, blocks[0])
        inner = ChainState(x=x, v=v)
        for k in range(1, n):
            inner = step(ubu, target, inner, (blocks[2 * k - 1], blocks[2 * k]))
        v, x = ou_flow(inner.v, inner.x, bub, half, blocks[-1])
        v = kick(v, target.gradient(x), bub, half)

        np.testing.assert_allclose(x, state.x, rtol=0.0, atol=1e-12)
        np.testing.assert_allclose(v, state.v, rtol=0.0, atol=1e-12)

    def test_one_gradient_per_step(self):
        base = make_gaussian_target([1.0, 5.0])
        for name, expected in (("EM", 10), ("EE", 10), ("UBU", 10), ("BUB", 11)):
            calls = []

            def counted(x, gradient=base.gradient):
                calls.append(1)
                return gradient(x)

            target = replace(base, gradient=counted)
            scheme = SchemeStep(name, h=0.2, c=0.2)
            initial = ChainState(x=np.ones(2), v=np.zeros(2) if scheme.kinetic else None)
            simulate(scheme, target, initial, n_steps=10, n_chains=3, seed=2)
            self.assertEqual(len(calls), expected, msg=name)

    def test_no_force_is_exact_flow(self):
        target = make_gaussian_target([2.0, 50.0])
        rng = np.random.default_rng(15)
        x, v = rng.standard_normal((1000, 2)), rng.standard_normal((1000, 2))
        for name in KINETIC:
            scheme = SchemeStep(name, h=0.7, c=0.0)
            noise = tuple(sample_noise_block(scheme.gamma, 0.35, 2, rng, size=(1000,)) for _ in range(2))
            state = step(scheme, target, ChainState(x=x, v=v), noise)
            np.testing.assert_allclose(state.v, scheme.e_h * v, rtol=1e-15, atol=0.0, err_msg=name)
            np.testing.assert_allclose(state.x, x + scheme.f_h * v, rtol=1e-15, atol=1e-15, err_msg=name)

    def test_hat_matrices(self):
        self.assertIsNone(SchemeStep("BUB", h=1.0, c=1.0).hat_matrices())
        A_h, B_h, C_h = SchemeStep("EM", h=0.5, c=2.0).hat_matrices()
        np.testing.assert_array_equal(A_h + B_h @ C_h, [[0.0]])
        self.assertEqual(SchemeStep("UBU", h=1.0, c=1.0).propagator(np.array([1.0, 2.0])).shape, (2, 2, 2))


class TestStrongOrder(unittest.TestCase):
    STEPS = (0.4, 0.2, 0.1, 0.05)

    def test_ee_order_one(self):
        target = make_gaussian_target([1.0, 4.0])
        report = strong_order_test(SchemeStep("EE", h=1.0, c=1.0 / target.L), target, hs=self.STEPS,
                                   n_paths=2000, horizon=2.0, seed=11, reference_refinement=16)
        self.assertGreaterEqual(report.slope, 0.9, msg=report)
        self.assertLessEqual(report.slope, 1.1, msg=report)
        self.assertEqual(report.errors, sorted(report.errors, reverse=True))

    def test_ubu_order_two_gaussian(self):
        target = make_gaussian_target([1.0, 4.0])
        report = strong_order_test(SchemeStep("UBU", h=1.0, c=1.0 / target.L), target, hs=self.STEPS,
                                   n_paths=2000, horizon=2.0, seed=12)
        self.assertGreaterEqual(report.slope, 1.85, msg=report)
        self.assertLessEqual(report.slope, 2.15, msg=report)
        self.assertAlmostEqual(report.reference_step, 0.05 / 8)

    def test_ubu_order_two_logistic(self):
        target = TargetLoader.load_logistic_target(DATA_DIR / 'logistic_sample.csv', ridge=1.0)
        report = strong_order_test(SchemeStep("UBU", h=1.0, c=1.0 / target.L), target, hs=self.STEPS,
                                   n_paths=2000, horizon=2.0, seed=13)
        self.assertGreaterEqual(report.slope, 1.8, msg=report)
        self.assertLessEqual(report.slope, 2.2, msg=report)

    def test_invalid_step_lists(self):
        target = make_gaussian_target([1.0])
        scheme = SchemeStep("EE", h=1.0, c=1.0)
        with self.assertRaises(InvalidParameterError):
            strong_order_test(scheme, target, hs=(0.5, 0.2), n_paths=4, horizon=1.0, seed=0)
        with self.assertRaises(InvalidParameterError):
            strong_order_test(scheme, target, hs=(0.5,), n_paths=4, horizon=1.0, seed=0)
        with self.assertRaises(InvalidParameterError):
            strong_order_test(scheme, target, hs=(0.4, 0.2), n_paths=4, horizon=1.0, seed=0)
        with self.assertRaises(InvalidParameterError):
            strong_order_test(scheme, target, hs=(0.5, 0.25), n_paths=4, horizon=1.0, seed=0,
                              reference_refinement=3)


class TestCoupling(unittest.TestCase):
    def test_ratios_bounded_by_rho(self):
        m, L = 1.0, 100.0
        target = make_gaussian_target([1.0, 7.5, 40.0, 100.0])
        checked = []
        for name in ("EM", "EE", "UBU", "BUB"):
            for h in (2.0, 1.0, 0.5, 0.25):
                scheme = SchemeStep(name, h=h, c=1.0 / L)
                metric = canonical_metric(scheme.N)
                report = discrete_rate(metric, scheme, m, L)
                if not report.contractive:
                    continue
                ratios = coupled_contraction_trace(scheme, target, metric.P, n_steps=10000, seed=4)
                self.assertEqual(ratios.shape, (10000,))
                self.assertLessEqual(float(ratios.max()), math.sqrt(report.rate) + 1e-12, msg=(name, h))
                checked.append((name, h))
        self.assertGreaterEqual(len(checked), 9, msg=checked)

    def test_equal_states_stay_equal(self):
        target = make_gaussian_target([1.0, 3.0, 9.0])
        rng = np.random.default_rng(8)
        for name in SCHEMES:
            scheme = SchemeStep(name, h=0.3, c=0.1)
            x, v = rng.standard_normal(3), rng.standard_normal(3) if scheme.kinetic else None
            noise = tuple(sample_noise_block(scheme.gamma, 0.5 * scheme.h, 3, rng) for _ in range(2))
            first, second = coupled_step(scheme, target, ChainState(x=x, v=v), ChainState(x=x.copy(), v=v),
                                         noise)
            np.testing.assert_array_equal(first.x, second.x, err_msg=name)
            if scheme.kinetic:
                np.testing.assert_array_equal(first.v, second.v, err_msg=name)

    def test_ee_expands_beyond_threshold(self):
        m, L = 1.0, 1e9
        metric = canonical_metric(2)
        scheme = SchemeStep("EE", h=2.0, c=1.0 / L)
        self.assertFalse(discrete_rate(metric, scheme, m, L).contractive)

        P = np.asarray(metric.P)
        M = scheme.propagator(L)
        values, vectors = linalg.eigh(M.T @ P @ M, P)
        gap = vectors[:, -1]
        first, second = coupled_step(scheme, make_gaussian_target([L]),
                                     ChainState(x=np.zeros(1), v=np.zeros(1)),
                                     ChainState(x=gap[1:], v=gap[:1]))
        after = second.as_vector() - first.as_vector()
        ratio = math.sqrt(after @ P @ after / (gap @ P @ gap))
        self.assertGreater(ratio, 1.0)
        self.assertAlmostEqual(ratio, math.sqrt(values[-1]), places=10)

    def test_metric_size_checked(self):
        with self.assertRaises(InvalidParameterError):
            coupled_contraction_trace(SchemeStep("UBU", h=0.5, c=0.1), make_gaussian_target([1.0]),
                                      np.eye(1), n_steps=3, seed=0)


class TestStreamsAndEnsembles(unittest.TestCase):
    def test_streams_are_per_chain(self):
        few = ChainStreams(9, 2).normals((5, 3))
        many = ChainStreams(9, 6).normals((5, 3))
        np.testing.assert_array_equal(few, many[:2])
        self.assertFalse(np.array_equal(many[0], many[1]))
        self.assertFalse(np.array_equal(few, ChainStreams(10, 2).normals((5, 3))))
        with self.assertRaises(InvalidParameterError):
            ChainStreams(0, 0)

    def test_simulate_is_reproducible(self):
        target = make_gaussian_target([1.0, 3.0])
        scheme = SchemeStep("UBU", h=0.3, c=1.0 / 3.0)
        initial = ChainState(x=np.ones(2), v=np.zeros(2))
        first = simulate(scheme, target, initial, n_steps=40, n_chains=5, seed=21, thin=10)
        second = simulate(scheme, target, initial, n_steps=40, n_chains=5, seed=21)
        np.testing.assert_array_equal(first.final.x, second.final.x)
        np.testing.assert_array_equal(first.final.v, second.final.v)
        self.assertEqual([s.n for s in first.trajectory], [0, 10, 20, 30, 40])
        self.assertEqual(first.final.x.shape, (5, 2))

    def test_initial_sampler(self):
        target = make_gaussian_target([2.0])
        scheme = SchemeStep("EM", h=0.1, c=0.5)
        ensemble = simulate(scheme, target, lambda rng: ChainState(x=rng.standard_normal(1)),
                            n_steps=0, n_chains=3, seed=1)
        self.assertEqual(ensemble.final.x.shape, (3, 1))
        self.assertIsNone(ensemble.final.v)

    def test_ensemble_csv(self):
        state = ChainState(x=np.array([[1.0, 2.0], [3.0, 4.0]]), v=np.array([[0.5, 0.25], [0.0, -1.0]]))
        lines = ensemble_csv(state).splitlines()
        self.assertEqual(lines[0], "chain,v0,v1,x0,x1")
        self.assertEqual(lines[1], "0,0.5,0.25,1.0,2.0")
        with tempfile.TemporaryDirectory() as tmp:
            path = write_ensemble_csv(ChainState(x=np.array([[1.5]])), Path(tmp) / 'final.csv')
            self.assertEqual(path.read_text(), "chain,x0\n0,1.5\n")


class TestInvalidInputs(unittest.TestCase):
    def test_scheme_parameters(self):
        for kwargs in ({"scheme": "RK4", "h": 0.1, "c": 1.0}, {"scheme": "EE", "h": 0.0, "c": 1.0},
                       {"scheme": "EE", "h": 0.1, "c": -1.0}, {"scheme": "UBU", "h": 0.1, "c": 1.0, "gamma": 0.0}):
            with self.assertRaises(InvalidParameterError, msg=kwargs):
                SchemeStep(**kwargs)
        self.assertEqual(SchemeStep("ubu", h=0.1, c=1.0).scheme, "UBU")

    def test_state_shapes(self):
        target = make_gaussian_target([1.0, 2.0])
        with self.assertRaises(InvalidParameterError):
            step(SchemeStep("EE", h=0.1, c=0.5), target, ChainState(x=np.zeros(2)))
        with self.assertRaises(InvalidParameterError):
            step(SchemeStep("EM", h=0.1, c=0.5), target, ChainState(x=np.zeros(3)))


if __name__ == '__main__':
    unittest.main()
