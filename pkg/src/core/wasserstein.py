import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from dataclasses_json import dataclass_json
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .contractivity import MetricP, canonical_metric, discrete_rate
from .errors import ConvergenceError, InvalidParameterError, NoInvariantError
from .integrators import ChainState, NoiseBlock, SchemeStep, noise_covariance, step
from .state_space import HatModel, make_model
from .targets import Target
from ..utils.linalg import is_symmetric, psd_sqrt, symmetrize
from ..utils.serialization import frozen_array, ndarray_field
from ..utils.settings import ASSIGNMENT_CAP, DEFAULT_GAMMA, LYAPUNOV_MAX_DOUBLINGS, LYAPUNOV_RESIDUAL, PSD_TOLERANCE

"""
Approach:

-> On a quadratic target f(x) = 0.5 x^T Q x every scheme is an affine map with
   additive Gaussian noise,  xi' = M xi + G omega,  omega = (dW, I_E) of both half
   steps. M and G are read off the implemented step() by probing it with unit
   states and unit noise, so the covariance recursion uses exactly what the sampler
   does.
-> The invariant covariance solves  Sigma = M Sigma M^T + G Sigma_omega G^T,
   found by doubling:
       Sigma_{k+1} = M_k Sigma_k M_k^T + N_k,  N_{k+1} = M_k N_k M_k^T + N_k,  M_{k+1} = M_k^2
-> Gaussian W2 in closed form; W_P is W2 after the change of coordinates
   xi -> (L_hat^T (x) I) xi with P_hat = L_hat L_hat^T.

Example:

    1D laws N(0, 1) and N(0, 4)
        W2^2 = 0 + (1 + 4) - 2 * sqrt(1 * 4) = 1      ->  W2 = 1 = |1 - 2|

    same covariance, means (0, 0) and (3, 4)
        W2 = |(3, 4)| = 5

    underdamped SDE invariant, c = 0.5, Q = diag(1, 4)
        v ~ N(0, 0.5 I),  x ~ N(0, diag(1, 0.25)), independent
"""

logger = logging.getLogger(__name__)


@dataclass_json
@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray = ndarray_field()
    covariance: np.ndarray = ndarray_field()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.array(self.covariance, dtype=float, ndmin=2)
        if cov.shape != (mean.size, mean.size):
            raise InvalidParameterError("Covariance must be a square matrix matching the mean")
        if not is_symmetric(cov, PSD_TOLERANCE * max(1.0, float(np.max(np.abs(cov), initial=0.0)))):
            raise InvalidParameterError("Covariance must be symmetric")
        cov = symmetrize(cov)
        if mean.size and linalg.eigvalsh(cov)[0] < -PSD_TOLERANCE * max(1.0, float(np.max(np.abs(cov)))):
            raise InvalidParameterError("Covariance must be positive semidefinite")
        object.__setattr__(self, "mean", frozen_array(mean))
        object.__setattr__(self, "covariance", frozen_array(cov))

    @property
    def dimension(self) -> int:
        return int(np.size(self.mean))


@dataclass_json
@dataclass(frozen=True)
class WassersteinResult:
    value: float
    metric: str            # W2 | W_P
    method: str            # gaussian-closed-form | empirical-assignment | sandwich-converted
    P: Optional[List[List[float]]] = None


def marginal(law: GaussianLaw, indices: Sequence[int]) -> GaussianLaw:
    idx = np.asarray(indices, dtype=int)
    return GaussianLaw(mean=np.asarray(law.mean)[idx], covariance=np.asarray(law.covariance)[np.ix_(idx, idx)])


def x_marginal(law: GaussianLaw, d: int) -> GaussianLaw:
    """The position block: the last d coordinates of xi = (v, x)."""
    if law.dimension not in (d, 2 * d):
        raise InvalidParameterError(f"Law of dimension {law.dimension} is not over x or (v, x) with d = {d}")
    return marginal(law, range(law.dimension - d, law.dimension))


def _lift(metric: MetricP, dimension: int) -> np.ndarray:
    N = metric.N
    if dimension % N:
        raise InvalidParameterError(f"Dimension {dimension} is not a multiple of N-hat = {N}")
    return np.kron(np.asarray(metric.factor).T, np.eye(dimension // N))


def gaussian_w2(g1: GaussianLaw, g2: GaussianLaw, metric: Optional[MetricP] = None) -> WassersteinResult:
    if g1.dimension != g2.dimension:
        raise InvalidParameterError(f"Dimension mismatch: {g1.dimension} vs {g2.dimension}")
    mu1, mu2 = np.asarray(g1.mean), np.asarray(g2.mean)
    s1, s2 = np.asarray(g1.covariance), np.asarray(g2.covariance)
    if metric is not None:
        T = _lift(metric, g1.dimension)
        mu1, mu2 = T @ mu1, T @ mu2
        s1, s2 = T @ s1 @ T.T, T @ s2 @ T.T

    root2 = psd_sqrt(s2)
    cross = linalg.eigvalsh(symmetrize(root2 @ s1 @ root2))
    w2_sq = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2)
                  - 2.0 * np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    return WassersteinResult(
        value=math.sqrt(max(w2_sq, 0.0)),
        metric="W2" if metric is None else "W_P",
        method="gaussian-closed-form",
        P=None if metric is None else np.asarray(metric.P).tolist(),
    )


def sandwich_upper(result: WassersteinResult, metric: MetricP) -> WassersteinResult:
    """W_P <= sqrt(p_max) W2, from a W2 value."""
    if result.metric != "W2":
        raise InvalidParameterError("Sandwich conversion starts from a W2 value")
    return WassersteinResult(value=math.sqrt(metric.p_max) * result.value, metric="W_P",
                             method="sandwich-converted", P=np.asarray(metric.P).tolist())


def quadratic_target(Q: np.ndarray) -> Target:
    Q = np.array(Q, dtype=float, ndmin=2)
    if Q.shape[0] != Q.shape[1] or not is_symmetric(Q, PSD_TOLERANCE):
        raise InvalidParameterError("Q must be a symmetric square matrix")
    Q = frozen_array(symmetrize(Q))
    eig = linalg.eigvalsh(Q)
    if eig[0] <= 0:
        raise InvalidParameterError("Q must be positive definite")

    return Target(
        dimension=Q.shape[0],
        gradient=lambda x: np.asarray(x, dtype=float) @ Q,
        value=lambda x: 0.5 * np.sum(np.asarray(x) * (np.asarray(x) @ Q), axis=-1),
        m=float(eig[0]), L=float(eig[-1]), L1=0.0, kind="gaussian", precision=Q,
        minimizer=frozen_array(np.zeros(Q.shape[0])),
    )


def affine_decomposition(scheme: SchemeStep, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(M, G, Sigma_omega) with xi' = M xi + G omega for one step on f = 0.5 x^T Q x."""
    target = quadratic_target(Q)
    d = target.dimension
    n_state = scheme.N * d
    delta = 0.5 * scheme.h

    def run(states: np.ndarray, dW1, ie1, dW2, ie2) -> np.ndarray:
        v = states[:, :d] if scheme.kinetic else None
        x = states[:, -d:]
        noise = (NoiseBlock(scheme.gamma, delta, dW1, ie1), NoiseBlock(scheme.gamma, delta, dW2, ie2))
        return np.atleast_2d(step(scheme, target, ChainState(x=x, v=v), noise).as_vector())

    zeros = np.zeros((n_state, d))
    M = run(np.eye(n_state), zeros, zeros, zeros, zeros).T

    basis = np.eye(4 * d).reshape(4 * d, 4, d)
    G = run(np.zeros((4 * d, n_state)), basis[:, 0], basis[:, 1], basis[:, 2], basis[:, 3]).T

    half = np.kron(noise_covariance(scheme.gamma, delta), np.eye(d))
    sigma_omega = linalg.block_diag(half, half)
    return M, G, sigma_omega


def lyapunov_residual(M: np.ndarray, N: np.ndarray, sigma: np.ndarray) -> float:
    return float(np.linalg.norm(M @ sigma @ M.T + N - sigma) / max(np.linalg.norm(sigma), 1e-300))


def solve_lyapunov_doubling(M: np.ndarray, N: np.ndarray,
                            max_doublings: int = LYAPUNOV_MAX_DOUBLINGS,
                            tolerance: float = LYAPUNOV_RESIDUAL) -> np.ndarray:
    """Sigma = M Sigma M^T + N for a contractive M."""
    sigma = symmetrize(np.asarray(N, dtype=float))
    Mk, Nk = np.asarray(M, dtype=float), sigma.copy()
    for k in range(max_doublings):
        update = Mk @ sigma @ Mk.T
        sigma = symmetrize(update + Nk)
        Nk = symmetrize(Mk @ Nk @ Mk.T + Nk)
        Mk = Mk @ Mk
        if np.linalg.norm(update) <= 1e-17 * np.linalg.norm(sigma) or not np.any(Mk):
            break
    residual = lyapunov_residual(M, N, sigma)
    if not residual <= tolerance:
        raise ConvergenceError(f"Lyapunov doubling stalled at relative residual {residual:.3e}")
    logger.debug("lyapunov solved", extra={"doublings": k + 1, "residual": residual})
    return sigma


def numerical_invariant(scheme: SchemeStep, Q: np.ndarray) -> GaussianLaw:
    target = quadratic_target(Q)
    report = discrete_rate(canonical_metric(scheme.N), scheme, target.m, target.L)
    if not report.contractive:
        raise NoInvariantError(
            f"{scheme.scheme} with h={scheme.h}, c={scheme.c} is not contractive on [{target.m}, {target.L}]")

    M, G, sigma_omega = affine_decomposition(scheme, Q)
    sigma = solve_lyapunov_doubling(M, G @ sigma_omega @ G.T)
    return GaussianLaw(mean=np.zeros(M.shape[0]), covariance=sigma)


def sde_invariant(model: HatModel, Q: np.ndarray) -> GaussianLaw:
    """Gaussian with precision C^T C (x) Q + S (x) I, the law proportional to exp(-f(C xi) - xi^T S xi / 2)."""
    target = quadratic_target(Q)
    d = target.dimension
    C, S = np.asarray(model.C), np.asarray(model.S)
    precision = np.kron(C.T @ C, np.asarray(target.precision)) + np.kron(S, np.eye(d))
    try:
        factor = linalg.cho_factor(precision)
    except linalg.LinAlgError:
        raise NoInvariantError("The model's invariant density is not normalizable on this target")
    cov = linalg.cho_solve(factor, np.eye(precision.shape[0]))
    return GaussianLaw(mean=np.zeros(precision.shape[0]), covariance=symmetrize(cov))


def empirical_w2(samples1: np.ndarray, samples2: np.ndarray,
                 metric: Optional[MetricP] = None) -> WassersteinResult:
    a = np.asarray(samples1, dtype=float)
    b = np.asarray(samples2, dtype=float)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if a.shape != b.shape:
        raise InvalidParameterError(f"Ensembles must have equal shapes, got {a.shape} and {b.shape}")
    if metric is not None:
        T = _lift(metric, a.shape[1])
        a, b = a @ T.T, b @ T.T

    n = a.shape[0]
    if a.shape[1] == 1:
        cost = float(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
    else:
        if n > ASSIGNMENT_CAP:
            raise InvalidParameterError(f"Exact assignment is capped at {ASSIGNMENT_CAP} samples, got {n}")
        costs = cdist(a, b, metric="sqeuclidean")
        rows, cols = linear_sum_assignment(costs)
        cost = float(costs[rows, cols].sum() / n)
    return WassersteinResult(
        value=math.sqrt(max(cost, 0.0)),
        metric="W2" if metric is None else "W_P",
        method="empirical-assignment",
        P=None if metric is None else np.asarray(metric.P).tolist(),
    )


@dataclass_json
@dataclass(frozen=True)
class BiasScan:
    scheme: str
    c: float
    gamma: float
    steps: List[float]
    full: List[float]
    x_marginal: List[float]
    slope_full: float
    slope_x: float


def _slope(hs: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(hs), np.log(values), 1)[0])


def invariant_bias_scan(scheme: str, Q: np.ndarray, hs: Sequence[float], c: float,
                        gamma: float = DEFAULT_GAMMA) -> BiasScan:
    """W2 between each step size's exact invariant law and the SDE's, full state and x only."""
    if len(hs) < 2:
        raise InvalidParameterError("Need at least two step sizes")
    template = SchemeStep(scheme, h=hs[0], c=c, gamma=gamma)
    model = make_model("underdamped" if template.kinetic else "overdamped", gamma, c)
    d = np.atleast_2d(Q).shape[0]
    exact = sde_invariant(model, Q)

    full, xs = [], []
    for h in hs:
        law = numerical_invariant(template.with_step(h), Q)
        full.append(gaussian_w2(law, exact).value)
        xs.append(gaussian_w2(x_marginal(law, d), x_marginal(exact, d)).value)

    scan = BiasScan(scheme=template.scheme, c=c, gamma=gamma, steps=[float(h) for h in hs], full=full,
                    x_marginal=xs, slope_full=_slope(hs, full), slope_x=_slope(hs, xs))
    logger.info("invariant bias", extra={"scheme": scan.scheme, "slope_full": scan.slope_full,
                                         "slope_x": scan.slope_x})
    return scan
