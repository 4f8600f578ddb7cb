import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dataclasses_json import dataclass_json
from scipy import linalg, optimize

from .errors import ConvergenceError, DegenerateCaseError, InvalidMetricError, InvalidParameterError
from .integrators import SchemeStep
from .state_space import HatModel, make_model
from ..utils.linalg import det2, generalized_eigvals, is_symmetric
from ..utils.parsing import ForceScale
from ..utils.serialization import frozen_array, ndarray_field
from ..utils.settings import DEFAULT_GAMMA, GOLDEN_ROUNDS, GOLDEN_XTOL, PSD_TOLERANCE, SWEEP_GRID, thread_count

"""
Approach:

-> Synchronously coupled solutions of a linear-in-gradient system contract in
   the norm |xi|_P^2 = xi^T (P_hat (x) I) xi when the small matrices

       continuous:  Z(H)   = -P K(H) - K(H)^T P,     K(H) = A + H B C
       discrete:    Z_h(H) = M_h(H)^T P M_h(H),      M_h(H) = A_h + H B_h C_h

   have generalized eigenvalues (Z x = lam P x) above 0, resp. below 1, for every
   Hessian eigenvalue H in [m, L].
-> lam  = inf_H  smallest eigenvalue  (continuous rate)
   rho  = sup_H  largest eigenvalue   (per-step squared contraction factor)
   The rate tables print (1 - rho^(1/2)) / h, which tends to lam / 2 as h -> 0.
-> H sweeps: dense grid (half linear, half geometric) over [m, L], then zoom
   rounds and a bounded scalar polish around the grid extremum.

Example:

    underdamped, gamma = 2, P = [[1, 1], [1, 2]], c = 1/L, m = 1, L = 10
        Z(H) = [[2, cH], [cH, 2cH]],   eigenvalues relative to P: cH and 4 - cH
        lam  = min over H in [1, 10] = c*m = 0.1 = 1/kappa

    UBU, same model, h = 1/2, kappa = 1e9, c = 3/(L+m)
        (1 - rho^(1/2)) / h = 1.500(-9)

    EE, h = 2, c = 1/L, kappa = 1e9
        rho > 1 at large H  ->  printed as ***
"""

logger = logging.getLogger(__name__)

CANONICAL_P = {1: [[1.0]], 2: [[1.0, 1.0], [1.0, 2.0]]}


@dataclass_json
@dataclass(frozen=True)
class MetricP:
    P: np.ndarray = ndarray_field()
    factor: np.ndarray = ndarray_field()
    p_min: float = 0.0
    p_max: float = 0.0

    @property
    def N(self) -> int:
        return int(np.shape(self.P)[0])


def make_metric(P) -> MetricP:
    P = np.array(P, dtype=float, ndmin=2)
    if not is_symmetric(P, PSD_TOLERANCE):
        raise InvalidMetricError("P must be a symmetric square matrix")
    try:
        factor = linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        raise InvalidMetricError("P must be positive definite")
    eig = linalg.eigvalsh(P)
    if eig[0] <= 0:
        raise InvalidMetricError("P must be positive definite")
    return MetricP(P=frozen_array(P), factor=frozen_array(factor), p_min=float(eig[0]), p_max=float(eig[-1]))


def canonical_metric(N: int) -> MetricP:
    if N not in CANONICAL_P:
        raise InvalidParameterError(f"No canonical metric for N-hat = {N}")
    return make_metric(CANONICAL_P[N])


@dataclass_json
@dataclass(frozen=True)
class ContractivityReport:
    kind: str                 # continuous | discrete
    rate: float               # lam (continuous) or rho (discrete)
    argument: float           # H where the extremum occurs
    contractive: bool
    m: float
    L: float
    grid: int
    refinements: int
    scheme: Optional[str] = None
    h: Optional[float] = None
    c: Optional[float] = None
    one_minus_rho: Optional[float] = None
    per_step_rate: Optional[float] = None   # (1 - rho^(1/2)) / h


def _check_interval(m: float, L: float):
    if not (0.0 < m <= L) or not math.isfinite(L):
        raise InvalidParameterError(f"Need 0 < m <= L, got m={m}, L={L}")


def _check_metric(metric: MetricP, N: int):
    if metric.N != N:
        raise InvalidMetricError(f"Metric is {metric.N}x{metric.N}, the model needs {N}x{N}")


def sweep_grid(m: float, L: float, grid: int = SWEEP_GRID) -> np.ndarray:
    half = max(grid // 2, 2)
    return np.unique(np.concatenate([np.linspace(m, L, half), np.geomspace(m, L, grid - half)]))


def _sweep(objective: Callable[[np.ndarray], np.ndarray], m: float, L: float,
           maximize: bool, grid: int) -> Tuple[float, float, int]:
    """Extremum of a vectorized objective over [m, L]; returns (value, H, rounds)."""
    sign = -1.0 if maximize else 1.0
    H = sweep_grid(m, L, grid)
    values = sign * objective(H)
    i = int(np.argmin(values))
    best_H, best = float(H[i]), float(values[i])

    rounds = 0
    for _ in range(GOLDEN_ROUNDS):
        lo, hi = float(H[max(i - 1, 0)]), float(H[min(i + 1, H.size - 1)])
        if hi - lo <= GOLDEN_XTOL * max(1.0, abs(best_H)):
            break
        H = np.linspace(lo, hi, 65)
        values = sign * objective(H)
        i = int(np.argmin(values))
        rounds += 1
        if values[i] < best:
            best_H, best = float(H[i]), float(values[i])

    lo, hi = float(H[max(i - 1, 0)]), float(H[min(i + 1, H.size - 1)])
    if hi > lo:
        polish = optimize.minimize_scalar(
            lambda x: float(sign * objective(np.array([x]))[0]), bounds=(lo, hi), method="bounded",
            options={"xatol": GOLDEN_XTOL * max(1.0, abs(best_H))})
        if polish.success and polish.fun < best:
            best_H, best = float(polish.x), float(polish.fun)
    return sign * best, best_H, rounds


def z_continuous(metric: MetricP, model: HatModel, H) -> np.ndarray:
    _check_metric(metric, model.N)
    H_arr = np.atleast_1d(np.asarray(H, dtype=float))
    K = np.asarray(model.A)[None] + H_arr[:, None, None] * (np.asarray(model.B) @ np.asarray(model.C))[None]
    PK = np.asarray(metric.P) @ K
    Z = -PK - np.swapaxes(PK, -1, -2)
    return Z[0] if np.ndim(H) == 0 else Z


def continuous_rate(metric: MetricP, model: HatModel, m: float, L: float,
                    grid: int = SWEEP_GRID) -> ContractivityReport:
    _check_interval(m, L)
    _check_metric(metric, model.N)
    P = np.asarray(metric.P)

    def smallest(H: np.ndarray) -> np.ndarray:
        return generalized_eigvals(z_continuous(metric, model, H), P)[..., 0]

    lam, H_star, rounds = _sweep(smallest, m, L, maximize=False, grid=grid)
    logger.debug("continuous rate", extra={"model": model.kind, "c": model.c, "lam": lam, "H": H_star})
    return ContractivityReport(kind="continuous", rate=lam, argument=H_star, contractive=lam > 0,
                               m=m, L=L, grid=grid, refinements=rounds, c=model.c)


def discrete_propagator(scheme: SchemeStep, H, h: Optional[float] = None) -> np.ndarray:
    if h is not None:
        scheme = scheme.with_step(h)
    return scheme.propagator(H)


def _gram(metric: MetricP, scheme: SchemeStep, H) -> np.ndarray:
    M = scheme.propagator(np.atleast_1d(np.asarray(H, dtype=float)))
    return np.swapaxes(M, -1, -2) @ np.asarray(metric.P) @ M


def _one_minus_rho(metric: MetricP, scheme: SchemeStep, H: float, rho: float, r_small: float) -> float:
    """1 - rho from p(1) = (1 - rho)(1 - r_small) = det(P - Z_h) / det(P)."""
    if scheme.N == 1:
        M = float(scheme.propagator(H)[0, 0])
        return (1.0 - abs(M)) * (1.0 + abs(M))
    if 1.0 - r_small < 1e-3:
        return 1.0 - rho
    P = np.asarray(metric.P)
    G = P - _gram(metric, scheme, H)[0]
    p_one = det2(G[0, 0], G[0, 1], G[1, 0], G[1, 1]) / det2(P[0, 0], P[0, 1], P[1, 0], P[1, 1])
    return float(p_one / (1.0 - r_small))


def discrete_rate(metric: MetricP, scheme: SchemeStep, m: float, L: float, h: Optional[float] = None,
                  grid: int = SWEEP_GRID) -> ContractivityReport:
    _check_interval(m, L)
    if h is not None:
        scheme = scheme.with_step(h)
    _check_metric(metric, scheme.N)
    P = np.asarray(metric.P)

    def largest(H: np.ndarray) -> np.ndarray:
        return generalized_eigvals(_gram(metric, scheme, H), P)[..., -1]

    rho, H_star, rounds = _sweep(largest, m, L, maximize=True, grid=grid)
    pair = generalized_eigvals(_gram(metric, scheme, H_star), P)[0]
    one_minus = _one_minus_rho(metric, scheme, H_star, rho, float(pair[0]))
    per_step = one_minus / (1.0 + math.sqrt(max(rho, 0.0))) / scheme.h
    contractive = rho < 1.0

    logger.debug("discrete rate", extra={"scheme": scheme.scheme, "h": scheme.h, "c": scheme.c,
                                         "rho": rho, "H": H_star, "contractive": contractive})
    return ContractivityReport(kind="discrete", rate=rho, argument=H_star, contractive=contractive,
                               m=m, L=L, grid=grid, refinements=rounds, scheme=scheme.scheme,
                               h=scheme.h, c=scheme.c, one_minus_rho=one_minus, per_step_rate=per_step)


def contractivity_threshold(metric: MetricP, scheme: SchemeStep, m: float, L: float,
                            h_max: float, rate: float, bisections: int = 30) -> float:
    """Largest h <= h_max (halving, then bisection) with rho_h <= (1 - rate*h)^2."""

    def ok(h: float) -> bool:
        report = discrete_rate(metric, scheme, m, L, h=h)
        return report.contractive and report.per_step_rate >= rate

    if ok(h_max):
        return h_max
    bad = h_max
    good = h_max / 2.0
    for _ in range(60):
        if ok(good):
            break
        bad, good = good, good / 2.0
    else:
        raise ConvergenceError(f"No contractive step size found below {h_max}")
    for _ in range(bisections):
        mid = 0.5 * (good + bad)
        if ok(mid):
            good = mid
        else:
            bad = mid
    logger.info("contractivity threshold", extra={"scheme": scheme.scheme, "h0": good, "rate": rate})
    return good


@dataclass_json
@dataclass(frozen=True)
class EigencurveTable:
    H: List[float]
    lambda_plus: List[float]
    lambda_minus: List[float]
    tilde_plus: List[float]
    tilde_minus: List[float]
    flag: List[str]
    scheme: str = ""
    h: float = 0.0
    c: float = 0.0

    def rows(self):
        return zip(self.H, self.lambda_plus, self.lambda_minus, self.tilde_plus, self.tilde_minus, self.flag)


def _continuous_pair(gamma: float, c: float, metric: MetricP, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(Lambda_plus, Lambda_minus) of the underdamped drift; plus is the branch nearest cH."""
    K = np.zeros((H.size, 2, 2))
    K[:, 0, 0] = -gamma
    K[:, 0, 1] = -c * H
    K[:, 1, 0] = 1.0
    PK = np.asarray(metric.P) @ K
    pair = generalized_eigvals(-PK - np.swapaxes(PK, -1, -2), np.asarray(metric.P))
    first_is_plus = np.abs(pair[:, 0] - c * H) <= np.abs(pair[:, 1] - c * H)
    plus = np.where(first_is_plus, pair[:, 0], pair[:, 1])
    minus = np.where(first_is_plus, pair[:, 1], pair[:, 0])
    return plus, minus


def eigencurves(scheme: SchemeStep, m: float, L: float, grid: int = 200,
                metric: Optional[MetricP] = None) -> EigencurveTable:
    if grid < 2:
        raise InvalidParameterError("Eigencurves need at least two grid points")
    if not scheme.kinetic:
        raise InvalidParameterError("Eigencurves are defined for the kinetic schemes")
    _check_interval(m, L)
    metric = metric or canonical_metric(2)
    P = np.asarray(metric.P)
    H = np.linspace(m, L, grid)

    plus, minus = _continuous_pair(scheme.gamma, scheme.c, metric, H)
    R = generalized_eigvals(_gram(metric, scheme, H), P)
    tilde = 2.0 * (1.0 - np.sqrt(np.clip(R, 0.0, None))) / scheme.h

    first_is_plus = np.abs(tilde[:, 0] - plus) <= np.abs(tilde[:, 1] - plus)
    tilde_plus = np.where(first_is_plus, tilde[:, 0], tilde[:, 1])
    tilde_minus = np.where(first_is_plus, tilde[:, 1], tilde[:, 0])

    M = scheme.propagator(H)
    tr = M[:, 0, 0] + M[:, 1, 1]
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    complex_pair = tr * tr - 4.0 * det < 0.0
    expanding = np.any(R > 1.0, axis=-1)
    flags = []
    for cplx, exp in zip(complex_pair, expanding):
        parts = [name for name, on in (("complex", cplx), ("expanding", exp)) if on]
        flags.append(";".join(parts) if parts else "ok")

    return EigencurveTable(H=H.tolist(), lambda_plus=plus.tolist(), lambda_minus=minus.tolist(),
                           tilde_plus=tilde_plus.tolist(), tilde_minus=tilde_minus.tolist(), flag=flags,
                           scheme=scheme.scheme, h=scheme.h, c=scheme.c)


@dataclass_json
@dataclass(frozen=True)
class OptimalMetric:
    l21: float
    l22: float
    c: float
    rate: float
    sup_value: float
    rate_check: float
    polished: bool


def _sup_terms(x: np.ndarray, weights: np.ndarray):
    """g(H) at H = m, L and its gradient in (l21, l22, s), with c = s / (L + m)."""
    p, q, s = x
    a = q * q + 2.0 * p - p * p
    gap = s * weights - a
    g = gap * gap / (q * q) + 4.0 * (1.0 - p) ** 2
    dp = -4.0 * gap * (1.0 - p) / (q * q) - 8.0 * (1.0 - p)
    dq = -4.0 * gap / q - 2.0 * gap * gap / q ** 3
    ds = 2.0 * gap * weights / (q * q)
    return g, np.stack([dp, dq, ds], axis=-1)


def optimal_underdamped(m: float, L: float) -> OptimalMetric:
    """Minimize over (l21, l22, c) the sup over H in [m, L] of the squared eigenvalue spread.

    With l11 = 1 the eigenvalues of L^-1 Z L^-T are 2 +- sqrt(g(H)),
        g(H) = (cH - a)^2 / l22^2 + 4 (1 - l21)^2,   a = l22^2 + 2 l21 - l21^2,
    a convex quadratic in H, so its sup sits at H = m or H = L.
    """
    if not (0.0 < m <= L):
        raise InvalidParameterError(f"Need 0 < m <= L, got m={m}, L={L}")
    if m == L:
        raise DegenerateCaseError("The optimal metric search excludes L = m")

    weights = np.array([m, L]) / (L + m)

    def constraint(x):
        g, _ = _sup_terms(x[:3], weights)
        return x[3] - g

    def constraint_jac(x):
        _, grad = _sup_terms(x[:3], weights)
        return np.hstack([-grad, np.ones((2, 1))])

    start = np.array([0.5, 0.8, 2.0, 0.0])
    start[3] = float(np.max(_sup_terms(start[:3], weights)[0])) + 0.1
    first = optimize.minimize(
        lambda x: x[3], start, jac=lambda x: np.array([0.0, 0.0, 0.0, 1.0]), method="SLSQP",
        bounds=[(-2.0, 3.0), (1e-3, 10.0), (1e-6, 8.0), (0.0, None)],
        constraints=[{"type": "ineq", "fun": constraint, "jac": constraint_jac}],
        options={"ftol": 1e-15, "maxiter": 500})
    x = first.x[:3]

    # both endpoints are active at the optimum: solve the KKT system for a clean finish
    def kkt(y):
        g, grad = _sup_terms(y[:3], weights)
        mu = y[3]
        return np.concatenate([(1.0 - mu) * grad[0] + mu * grad[1], [g[0] - g[1]]])

    _, grad = _sup_terms(x, weights)
    mu0 = grad[0, 2] / (grad[0, 2] - grad[1, 2]) if grad[0, 2] != grad[1, 2] else 0.5
    polish = optimize.root(kkt, np.append(x, mu0), method="hybr", tol=1e-15)
    polished = bool(polish.success and polish.x[1] > 0 and 0.0 <= polish.x[3] <= 1.0)
    if polished and np.max(_sup_terms(polish.x[:3], weights)[0]) <= np.max(_sup_terms(x, weights)[0]) + 1e-12:
        x = polish.x[:3]
    else:
        polished = False

    p, q, s = (float(v) for v in x)
    sup_value = float(np.max(_sup_terms(x, weights)[0]))
    c = s / (L + m)
    rate = 2.0 - math.sqrt(sup_value)

    metric = make_metric([[1.0, p], [p, p * p + q * q]])
    check = continuous_rate(metric, make_model("underdamped", DEFAULT_GAMMA, c), m, L).rate
    logger.info("optimal metric", extra={"l21": p, "l22": q, "c": c, "rate": rate, "check": check})
    return OptimalMetric(l21=p, l22=q, c=c, rate=rate, sup_value=sup_value, rate_check=check, polished=polished)


def format_rate(value: Optional[float]) -> str:
    """Rate-table style: 5.000(-10); None marks a non-contractive cell."""
    if value is None:
        return "***"
    mantissa, exponent = f"{value:.3e}".split("e")
    return f"{mantissa}({int(exponent)})"


def format_scientific(value: Optional[float]) -> str:
    return "***" if value is None else f"{value:.3e}"


@dataclass_json
@dataclass(frozen=True)
class RateTable:
    kappa: float
    m: float
    L: float
    gamma: float
    steps: List[float]
    columns: List[str]
    cells: List[List[Optional[float]]] = field(default_factory=list)   # None = non-contractive

    def formatted(self) -> List[List[str]]:
        return [[format_rate(v) for v in row] for row in self.cells]


def table1(kappas: Sequence[float], scales: Sequence[ForceScale], hs: Sequence[float],
           schemes: Sequence[str] = ("EE", "UBU"), gamma: float = DEFAULT_GAMMA,
           m: float = 1.0, metric: Optional[MetricP] = None) -> List[RateTable]:
    """One table per kappa: rows h, columns (force scale, scheme), cells (1 - rho^(1/2)) / h."""
    metric = metric or canonical_metric(2)
    if any(not k >= 1 for k in kappas):
        raise InvalidParameterError("Condition numbers must be >= 1")

    columns = [(scale, scheme) for scale in scales for scheme in schemes]
    jobs: Dict[Tuple[int, int, int], SchemeStep] = {}
    for t, kappa in enumerate(kappas):
        L = kappa * m
        for i, h in enumerate(hs):
            for j, (scale, scheme) in enumerate(columns):
                jobs[(t, i, j)] = SchemeStep(scheme, h=h, c=scale.value(m, L), gamma=gamma)

    def evaluate(key):
        t, _, _ = key
        report = discrete_rate(metric, jobs[key], m, kappas[t] * m)
        return key, report.per_step_rate if report.contractive else None

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = dict(pool.map(evaluate, sorted(jobs)))

    tables = []
    for t, kappa in enumerate(kappas):
        cells = [[results[(t, i, j)] for j in range(len(columns))] for i in range(len(hs))]
        tables.append(RateTable(kappa=kappa, m=m, L=kappa * m, gamma=gamma, steps=list(hs),
                                columns=[f"{scheme} c={scale.label}" for scale, scheme in columns],
                                cells=cells))
    return tables
