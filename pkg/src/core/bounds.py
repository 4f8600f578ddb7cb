import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional

import numpy as np
from dataclasses_json import dataclass_json
from typing_extensions import Self

from .contractivity import canonical_metric, contractivity_threshold, discrete_rate
from .errors import BoundUnavailableError, ConvergenceError, InvalidParameterError
from .integrators import SchemeStep
from ..utils.settings import DEFAULT_GAMMA, DEFAULT_RBAR, DEFAULT_SPLIT, LOCAL_ERROR_STEP_LIMIT

"""
Approach:

-> A scheme with strong order p and local-error constants (C0, C1, C2) that
   contracts at rate r (rho_h <= (1 - r h)^2) satisfies, for any initial law,

       W_P(law_n, target) <= (1 - h R_h)^n W0 + (sqrt(2) C1 / sqrt(R_h) + C2 / R_h) h^p
       R_h = (1 - sqrt((1 - r h)^2 + C0 h^2)) / h

-> Planning spends a*eps on the bias term (fixes h) and (1-a)*eps on the
   contraction term (fixes n).

Example:

    r = 0.5, h = 0.1, C0 = 1
        (1 - r h)^2 + C0 h^2 = 0.9025 + 0.01 = 0.9125
        R_h = (1 - 0.955249) / 0.1 = 0.44751

    EE plan, c = 1/L, m = 1, kappa = 100, d = 1, eps = 0.01, rbar = 0.45
        K = (1 + sqrt 5)/3,  C2 = K / sqrt(L) = 0.10787,  r = 0.0045
        h = eps/2 * r / C2 = 2.086e-4
        n = log(W0 / (eps/2)) / (h r) + 1
"""

logger = logging.getLogger(__name__)

K_EE = (1.0 + math.sqrt(5.0)) / 3.0
K0_UBU = math.sqrt(2.0 * math.sqrt(2.0) / (3.0 - math.sqrt(5.0)))
K1_UBU = math.sqrt(3.0) / 12.0
K2_UBU = math.sqrt((3.0 + math.sqrt(5.0)) / 2.0) / 24.0


@dataclass_json
@dataclass(frozen=True)
class BoundParams:
    scheme: str
    p: int
    C0: float
    C1: float
    C2: float
    h0: float
    r: float = 0.0

    def __post_init__(self):
        if self.p not in (1, 2):
            raise InvalidParameterError(f"Strong order must be 1 or 2, got {self.p}")
        if min(self.C0, self.C1, self.C2) < 0:
            raise InvalidParameterError("Local error constants must be nonnegative")

    def with_rate(self, r: float) -> Self:
        return replace(self, r=float(r))

    def R(self, h: float) -> float:
        """R_h in the cancellation-free form (r(2 - r h) - C0 h) / (1 + sqrt((1 - r h)^2 + C0 h^2))."""
        r, C0 = self.r, self.C0
        root = math.sqrt((1.0 - r * h) ** 2 + C0 * h * h)
        return (r * (2.0 - r * h) - C0 * h) / (1.0 + root)

    def bias(self, h: float) -> float:
        R = self.R(h)
        if not R > 0:
            raise BoundUnavailableError(f"R_h = {R:.3e} <= 0 at h = {h}; the bound needs a smaller step")
        return (math.sqrt(2.0) * self.C1 / math.sqrt(R) + self.C2 / R) * h ** self.p


def _check_constants(c: float, L: float, d: float):
    if not (c > 0 and L > 0):
        raise InvalidParameterError(f"Need c > 0 and L > 0, got c={c}, L={L}")
    if d < 0:
        raise InvalidParameterError(f"Dimension must be nonnegative, got {d}")


def constants_ee(c: float, L: float, d: float) -> BoundParams:
    _check_constants(c, L, d)
    return BoundParams(scheme="EE", p=1, C0=0.0, C1=0.0, C2=K_EE * c ** 1.5 * L * math.sqrt(d),
                       h0=LOCAL_ERROR_STEP_LIMIT["EE"])


def constants_ubu(c: float, L: float, L1: Optional[float], d: float) -> BoundParams:
    _check_constants(c, L, d)
    root_d = math.sqrt(d)
    h0 = LOCAL_ERROR_STEP_LIMIT["UBU"]
    if L1 is None:
        # order one: the full local error divided by h^2, evaluated at the validity limit
        C2 = (0.25 * (1.0 + (1.0 / 6.0 + math.sqrt(42.0) / 12.0) * h0) * c ** 1.5 * L
              + 0.5 * (1.0 + h0 / 6.0) * c * math.sqrt(L)
              + math.sqrt(3.0) / 12.0 * h0 * (1.0 + h0 / 2.0) * c * c * L ** 1.5) * root_d
        return BoundParams(scheme="UBU", p=1, C0=0.0, C1=0.0, C2=C2, h0=h0)
    if L1 < 0:
        raise InvalidParameterError("L1 must be nonnegative")
    C2 = K2_UBU * ((1.0 + 4.0 * math.sqrt(3.0)) * c * c * L ** 1.5
                   + (3.0 + math.sqrt(42.0) / 2.0) * c ** 1.5 * L
                   + 6.0 * c * math.sqrt(L)
                   + math.sqrt(3.0) * c * c * L1) * root_d
    return BoundParams(scheme="UBU", p=2, C0=K0_UBU * (2.0 + c * L), C1=K1_UBU * c ** 1.5 * L * root_d,
                       C2=C2, h0=h0)


def mixing_bound(params: BoundParams, W0: float, h: float, n: int) -> float:
    if not 0 < h <= params.h0:
        raise InvalidParameterError(f"Step {h} outside (0, {params.h0}]")
    if n < 0 or W0 < 0:
        raise InvalidParameterError("Need n >= 0 and W0 >= 0")
    bias = params.bias(h)
    contraction = W0 * math.exp(n * math.log1p(-h * params.R(h))) if W0 > 0 else 0.0
    return contraction + bias


@dataclass_json
@dataclass(frozen=True)
class MixingPlan:
    scheme: str
    h: float
    n: int
    eps: float
    kappa: float
    m: float
    d: float
    W0: float
    rbar: float
    a: float
    rate_mode: str
    r: float
    h0: float
    bound: float
    contraction_part: float
    bias_part: float
    params: BoundParams
    exact_bound_available: Optional[bool] = None
    exact_bound: Optional[float] = None


@lru_cache(maxsize=256)
def _effective_h0(scheme: str, m: float, L: float, limit: float, r: float, gamma: float) -> float:
    limit_step = SchemeStep(scheme, h=limit, c=1.0 / L, gamma=gamma)
    try:
        return contractivity_threshold(canonical_metric(2), limit_step, m, L, h_max=limit, rate=r)
    except ConvergenceError:
        raise BoundUnavailableError(f"{scheme} never contracts at rate {r:.3e} below h = {limit}")


def _bias_step(params: BoundParams, target: float, h_cap: float) -> float:
    """Largest h <= h_cap with bias(h) <= target; params must carry C0 = 0, so R_h = r."""
    coefficient = math.sqrt(2.0) * params.C1 / math.sqrt(params.r) + params.C2 / params.r
    if coefficient == 0.0:
        return h_cap
    h = (target / coefficient) ** (1.0 / params.p) * (1.0 - 1e-12)
    return min(h, h_cap)


def plan(scheme: str, eps: float, kappa: float, m: float, d: float, W0: float,
         rbar: float = DEFAULT_RBAR, h0: Optional[float] = None, L1: Optional[float] = None,
         a: float = DEFAULT_SPLIT, rate_mode: str = "prescribed", gamma: float = DEFAULT_GAMMA,
         check_contractivity: bool = True) -> MixingPlan:
    """Step size and step count reaching W_P <= eps from an initial distance W0, with c = 1/L."""
    scheme = scheme.upper()
    if scheme not in LOCAL_ERROR_STEP_LIMIT:
        raise InvalidParameterError(f"Plans exist for {tuple(LOCAL_ERROR_STEP_LIMIT)}, got {scheme!r}")
    if not eps > 0:
        raise InvalidParameterError("eps must be positive")
    if not (kappa >= 1 and m > 0 and d >= 0 and W0 >= 0):
        raise InvalidParameterError("Need kappa >= 1, m > 0, d >= 0, W0 >= 0")
    if not 0 < rbar < 0.5:
        raise InvalidParameterError(f"rbar must lie in (0, 1/2), got {rbar}")
    if not 0 < a < 1:
        raise InvalidParameterError(f"eps split must lie in (0, 1), got {a}")
    if rate_mode not in ("prescribed", "computed"):
        raise InvalidParameterError(f"Unknown rate mode {rate_mode!r}")

    L = kappa * m
    c = 1.0 / L
    limit = LOCAL_ERROR_STEP_LIMIT[scheme] if h0 is None else min(h0, LOCAL_ERROR_STEP_LIMIT[scheme])

    if rate_mode == "computed":
        report = discrete_rate(canonical_metric(2), SchemeStep(scheme, h=limit, c=c, gamma=gamma), m, L)
        if not (report.contractive and report.per_step_rate > 0):
            raise BoundUnavailableError(f"{scheme} is not contractive at h = {limit}")
        r, h_eff = report.per_step_rate, limit
    else:
        r = rbar / kappa
        h_eff = _effective_h0(scheme, m, L, limit, r, gamma) if check_contractivity else limit

    if scheme == "EE":
        params = constants_ee(c, L, d)
        exact = None
    else:
        exact = constants_ubu(c, L, L1, d).with_rate(r)
        # the planning form drops C0: R_h -> r as h -> 0
        params = replace(exact, C0=0.0)
    params = replace(params, h0=h_eff).with_rate(r)

    h = _bias_step(params, a * eps, h_eff)
    R = params.R(h)
    spare = (1.0 - a) * eps
    if W0 <= spare:
        n = 1
    else:
        n = int(math.floor(math.log(W0 / spare) / -math.log1p(-h * R))) + 1

    bias = params.bias(h)
    contraction = W0 * math.exp(n * math.log1p(-h * R)) if W0 > 0 else 0.0
    exact_available = exact_bound = None
    if exact is not None and exact.C0 > 0:
        exact_available = exact.R(h) > 0
        if exact_available:
            exact_bound = mixing_bound(replace(exact, h0=h_eff), W0, h, n)

    result = MixingPlan(scheme=scheme, h=h, n=n, eps=eps, kappa=kappa, m=m, d=d, W0=W0, rbar=rbar, a=a,
                        rate_mode=rate_mode, r=r, h0=h_eff, bound=contraction + bias,
                        contraction_part=contraction, bias_part=bias, params=params,
                        exact_bound_available=exact_available, exact_bound=exact_bound)
    logger.info("mixing plan", extra={"scheme": scheme, "h": h, "n": n, "eps": eps, "kappa": kappa, "d": d})
    return result


@dataclass_json
@dataclass(frozen=True)
class GronwallCheck:
    sequence: List[float]
    bound: List[float]
    holds: bool


def gronwall_recursion_check(A: float, B: float, C: float, z0: float, n: int) -> GronwallCheck:
    """Runs z_{k+1} = sqrt((1-A)^2 z_k^2 + B) + C and compares with (1-A)^k z0 + sqrt(B/A) + C/A."""
    if not 0 < A < 1:
        raise InvalidParameterError(f"A must lie in (0, 1), got {A}")
    if B < 0 or C < 0 or z0 < 0 or n < 0:
        raise InvalidParameterError("Need B, C, z0 >= 0 and n >= 0")

    k = np.arange(n + 1)
    bound = (1.0 - A) ** k * z0 + math.sqrt(B / A) + C / A
    z = np.empty(n + 1)
    z[0] = z0
    for i in range(n):
        z[i + 1] = math.sqrt((1.0 - A) ** 2 * z[i] ** 2 + B) + C
    slack = 1e-12 * np.maximum(1.0, bound)
    return GronwallCheck(sequence=z.tolist(), bound=bound.tolist(), holds=bool(np.all(z <= bound + slack)))
