"""Ornstein-Uhlenbeck kernels E, F, G shared by the integrators and the rate analysis.

With friction gamma the free flow dv = -gamma v dt, dx = v dt over a time t is

    v(t) = E(t) v,   x(t) = x + F(t) v,

and the force enters the exact flow with weight G(t):

    E(t) = exp(-gamma t)
    F(t) = (1 - exp(-gamma t)) / gamma
    G(t) = (gamma t + exp(-gamma t) - 1) / gamma**2

Below gamma*t < SERIES_THRESHOLD the closed forms cancel badly, so truncated Taylor
series are used instead; gamma = 0 is the t, t**2/2 limit.
"""
from typing import Union

import numpy as np

from .settings import SERIES_THRESHOLD

ArrayLike = Union[float, np.ndarray]


def _finish(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def ou_e(gamma: float, t: ArrayLike) -> ArrayLike:
    return _finish(np.exp(-gamma * np.asarray(t, dtype=float)))


def ou_f(gamma: float, t: ArrayLike) -> ArrayLike:
    t = np.asarray(t, dtype=float)
    a = gamma * t
    series = t * (1.0 - a / 2.0 + a * a / 6.0 - a ** 3 / 24.0)
    if gamma == 0.0:
        return _finish(series)
    direct = -np.expm1(-a) / gamma
    return _finish(np.where(np.abs(a) < SERIES_THRESHOLD, series, direct))


def ou_g(gamma: float, t: ArrayLike) -> ArrayLike:
    t = np.asarray(t, dtype=float)
    a = gamma * t
    series = t * t * (0.5 - a / 6.0 + a * a / 24.0 - a ** 3 / 120.0)
    if gamma == 0.0:
        return _finish(series)
    direct = (a + np.expm1(-a)) / (gamma * gamma)
    return _finish(np.where(np.abs(a) < SERIES_THRESHOLD, series, direct))


def ou_variance(gamma: float, t: ArrayLike) -> ArrayLike:
    """Var of int_0^t E(t - s) dW_s, i.e. (1 - exp(-2 gamma t)) / (2 gamma)."""
    return ou_f(2.0 * gamma, t)


def ou_conditional_variance(gamma: float, t: float) -> float:
    """Var(I_E | dW) = Var(I_E) - F(t)**2 / t, the Schur complement of the noise block."""
    a = gamma * t
    if a < 1e-3:
        # leading terms of t * a**2/12 * (1 - a + 17 a**2 / 30)
        return t * a * a / 12.0 * (1.0 - a + 17.0 * a * a / 30.0)
    f = ou_f(gamma, t)
    return max(ou_variance(gamma, t) - f * f / t, 0.0)
