import math
import unittest

import numpy as np
from scipy import linalg

from src.core.contractivity import canonical_metric
from src.core.errors import InvalidParameterError, NoInvariantError
from src.core.integrators import ChainState, SchemeStep, simulate
from src.core.state_space import make_model
from src.core.targets import make_gaussian_target
from src.core.wasserstein import (GaussianLaw, affine_decomposition, empirical_w2, gaussian_w2,
                                  invariant_bias_scan, lyapunov_residual, numerical_invariant, sandwich_upper,
                                  sde_invariant, solve_lyapunov_doubling, x_marginal)


"""
Testing scenarios:
-> Gaussian W2
   Closed form, then the P-weighted version squeezed between
   sqrt(p_min) W2 and sqrt(p_max) W2.
    Example:

    N(0, 1) vs N(0, 4)               -> 1
    N((0, 0), I) vs N((3, 4), I)     -> 5

-> Invariant laws
   SDE: underdamped, c = 0.5, Q = diag(1, 4) gives v ~ N(0, 0.5 I) and
   x ~ N(0, diag(1, 0.25)). Numerical: the doubling solution agrees with
   scipy's discrete Lyapunov solver and with a long ensemble run.

-> Invariant bias
   d = 10, spectrum 1..10, c = 1/L, h = 0.2, 0.1, 0.05, 0.025:
   EE slope ~ 1, UBU slope ~ 2, EM (overdamped) slope ~ 1.

-> Empirical W2
   Zero on identical ensembles, exact on 1D shifts, symmetric, triangle
   inequality, and close to the closed form for 2048 Gaussian samples.
"""

BIAS_STEPS = [0.2, 0.1, 0.05, 0.025]


def _random_law(rng: np.random.Generator, n: int) -> GaussianLaw:
    a = rng.standard_normal((n, n))
    return GaussianLaw(mean=rng.standard_normal(n), covariance=a @ a.T + 0.1 * np.eye(n))


class TestGaussianW2(unittest.TestCase):
    def test_examples(self):
        one = gaussian_w2(GaussianLaw(mean=[0.0], covariance=[[1.0]]), GaussianLaw(mean=[0.0], covariance=[[4.0]]))
        self.assertAlmostEqual(one.value, 1.0, places=12)
        self.assertEqual((one.metric, one.method), ("W2", "gaussian-closed-form"))
        shifted = gaussian_w2(GaussianLaw(mean=[0.0, 0.0], covariance=np.eye(2)),
                              GaussianLaw(mean=[3.0, 4.0], covariance=np.eye(2)))
        self.assertAlmostEqual(shifted.value, 5.0, places=12)

    def test_identical_laws(self):
        law = _random_law(np.random.default_rng(1), 4)
        self.assertLess(gaussian_w2(law, law).value, 1e-6)

    def test_commuting_covariances(self):
        g1 = GaussianLaw(mean=np.zeros(3), covariance=np.diag([1.0, 4.0, 9.0]))
        g2 = GaussianLaw(mean=np.zeros(3), covariance=np.diag([4.0, 4.0, 1.0]))
        self.assertAlmostEqual(gaussian_w2(g1, g2).value, math.sqrt(1.0 + 0.0 + 4.0), places=12)

    def test_sandwich(self):
        rng = np.random.default_rng(2)
        metric = canonical_metric(2)
        for _ in range(20):
            g1, g2 = _random_law(rng, 4), _random_law(rng, 4)
            w2 = gaussian_w2(g1, g2)
            wp = gaussian_w2(g1, g2, metric)
            self.assertEqual(wp.metric, "W_P")
            self.assertLessEqual(wp.value, sandwich_upper(w2, metric).value + 1e-10)
            self.assertGreaterEqual(wp.value, math.sqrt(metric.p_min) * w2.value - 1e-10)
        with self.assertRaises(InvalidParameterError):
            sandwich_upper(wp, metric)

    def test_invalid_laws(self):
        with self.assertRaises(InvalidParameterError):
            GaussianLaw(mean=[0.0, 0.0], covariance=[[1.0]])
        with self.assertRaises(InvalidParameterError):
            GaussianLaw(mean=[0.0], covariance=[[-1.0]])
        with self.assertRaises(InvalidParameterError):
            GaussianLaw(mean=[0.0, 0.0], covariance=[[1.0, 0.5], [0.0, 1.0]])
        with self.assertRaises(InvalidParameterError):
            gaussian_w2(GaussianLaw(mean=[0.0], covariance=[[1.0]]), GaussianLaw(mean=[0.0, 0.0], covariance=np.eye(2)))
        with self.assertRaises(InvalidParameterError):
            gaussian_w2(GaussianLaw(mean=[0.0] * 3, covariance=np.eye(3)),
                        GaussianLaw(mean=[0.0] * 3, covariance=np.eye(3)), canonical_metric(2))


class TestInvariantLaws(unittest.TestCase):
    def test_sde_invariant_underdamped(self):
        law = sde_invariant(make_model("underdamped", 2.0, 0.5), np.diag([1.0, 4.0]))
        np.testing.assert_allclose(law.covariance, np.diag([0.5, 0.5, 1.0, 0.25]), atol=1e-15)
        np.testing.assert_allclose(x_marginal(law, 2).covariance, np.diag([1.0, 0.25]), atol=1e-15)

    def test_sde_invariant_overdamped(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        law = sde_invariant(make_model("overdamped", c=0.3), Q)
        np.testing.assert_allclose(law.covariance, np.linalg.inv(Q), rtol=1e-13)

    def test_doubling_matches_scipy(self):
        Q = np.diag([1.0, 4.0])
        M, G, sigma_omega = affine_decomposition(SchemeStep("UBU", h=0.3, c=0.2), Q)
        self.assertEqual((M.shape, G.shape, sigma_omega.shape), ((4, 4), (4, 8), (8, 8)))
        N = G @ sigma_omega @ G.T
        sigma = solve_lyapunov_doubling(M, N)
        self.assertLessEqual(lyapunov_residual(M, N, sigma), 1e-12)
        np.testing.assert_allclose(sigma, linalg.solve_discrete_lyapunov(M, N), rtol=1e-9, atol=1e-12)

    def test_propagator_from_probing(self):
        H = 3.0
        for name in ("EE", "UBU", "BUB"):
            scheme = SchemeStep(name, h=0.4, c=0.2)
            M, _, _ = affine_decomposition(scheme, np.array([[H]]))
            np.testing.assert_allclose(M, scheme.propagator(H), rtol=1e-13, atol=1e-15, err_msg=name)

    def test_long_run_matches_invariant(self):
        spectrum = [1.0, 3.0]
        scheme = SchemeStep("UBU", h=0.5, c=1.0 / 3.0)
        law = numerical_invariant(scheme, np.diag(spectrum))
        ensemble = simulate(scheme, make_gaussian_target(spectrum), ChainState(x=np.ones(2), v=np.zeros(2)),
                            n_steps=200, n_chains=4000, seed=8)
        samples = ensemble.final.as_vector()
        expected = np.diag(law.covariance)
        observed = samples.var(axis=0, ddof=1)
        tolerance = 4.0 * expected * math.sqrt(2.0 / samples.shape[0])
        self.assertTrue(np.all(np.abs(observed - expected) < tolerance), msg=f"{observed} vs {expected}")

    def test_no_invariant_when_expanding(self):
        with self.assertRaises(NoInvariantError):
            numerical_invariant(SchemeStep("EE", h=2.0, c=1.0), np.diag([1.0, 10.0]))
        with self.assertRaises(InvalidParameterError):
            numerical_invariant(SchemeStep("EE", h=0.1, c=1.0), np.diag([1.0, -1.0]))


class TestInvariantBias(unittest.TestCase):
    Q = np.diag(np.linspace(1.0, 10.0, 10))

    def _assert_slopes(self, scheme: str, low: float, high: float):
        scan = invariant_bias_scan(scheme, self.Q, BIAS_STEPS, c=0.1)
        for slope in (scan.slope_full, scan.slope_x):
            self.assertGreaterEqual(slope, low, msg=scan)
            self.assertLessEqual(slope, high, msg=scan)
        self.assertEqual(scan.steps, BIAS_STEPS)

    def test_ee(self):
        self._assert_slopes("EE", 0.9, 1.1)

    def test_ubu(self):
        self._assert_slopes("UBU", 1.9, 2.1)

    def test_euler_maruyama(self):
        self._assert_slopes("EM", 0.9, 1.1)

    def test_needs_two_steps(self):
        with self.assertRaises(InvalidParameterError):
            invariant_bias_scan("EE", self.Q, [0.1], c=0.1)


class TestEmpiricalW2(unittest.TestCase):
    def test_identical_and_shifted(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((100, 2))
        self.assertEqual(empirical_w2(a, a).value, 0.0)
        line = rng.standard_normal(500)
        self.assertAlmostEqual(empirical_w2(line, line + 3.0).value, 3.0, places=12)

    def test_metric_properties(self):
        rng = np.random.default_rng(4)
        a, b, c = (rng.standard_normal((60, 2)) + shift for shift in (0.0, 1.0, -0.5))
        ab, ba = empirical_w2(a, b).value, empirical_w2(b, a).value
        self.assertAlmostEqual(ab, ba, places=12)
        self.assertLessEqual(empirical_w2(a, c).value, ab + empirical_w2(b, c).value + 1e-12)

    def test_gaussian_samples(self):
        rng = np.random.default_rng(5)
        n = 2048
        a = rng.standard_normal((n, 2))
        b = np.array([1.0, 1.0]) + rng.standard_normal((n, 2)) * np.array([2.0, 1.0])
        exact = gaussian_w2(GaussianLaw(mean=np.zeros(2), covariance=np.eye(2)),
                            GaussianLaw(mean=np.ones(2), covariance=np.diag([4.0, 1.0]))).value
        self.assertAlmostEqual(exact, math.sqrt(3.0), places=12)
        self.assertLess(abs(empirical_w2(a, b).value - exact) / exact, 0.1)

    def test_weighted_norm(self):
        metric = canonical_metric(2)
        a = np.zeros((1, 2))
        b = np.array([[1.0, 0.0]])
        result = empirical_w2(a, b, metric)
        self.assertAlmostEqual(result.value, 1.0, places=12)
        self.assertEqual(result.metric, "W_P")

    def test_limits(self):
        with self.assertRaises(InvalidParameterError):
            empirical_w2(np.zeros((3, 2)), np.zeros((4, 2)))
        with self.assertRaises(InvalidParameterError):
            empirical_w2(np.zeros((2049, 2)), np.ones((2049, 2)))


if __name__ == '__main__':
    unittest.main()
