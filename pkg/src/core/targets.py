import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from dataclasses_json import dataclass_json
from scipy import linalg
from scipy.special import expit

from .errors import InvalidParameterError, InvalidTargetError
from ..utils.serialization import frozen_array, ndarray_field
from ..utils.settings import PROBE_TOLERANCE

"""
Approach:

-> A Target is the potential f of the density exp(-f): value and gradient
   oracles plus the constants the analysis consumes (m, L, and the third
   derivative bound L1 when it is known).
-> Oracles work on a single point of shape (d,) or on a batch (..., d), so a whole
   ensemble of chains is advanced with one gradient call.
-> Targets are frozen after construction; arrays inside are read-only.

Example:

    Gaussian target with spectrum [1, 10]
        f(x) = 0.5 * x^T Q x,  grad f(x) = Q x,  m = 1, L = 10, L1 = 0

    Ridge-logistic target, one datum a = (1, 0), label +1, ridge 1
        f(x) = log(1 + exp(-x_1)) + 0.5 * |x|^2
        grad f(0) = (-0.5, 0)      because sigma(0) = 1/2

    Checking the declared constants
        pairs (x, y) are drawn at random and the Rayleigh quotient
            <grad f(x) - grad f(y), x - y> / |x - y|^2
        must fall inside [m, L]. Declaring L = 5 for spectrum [1, 10] makes the
        report show a violation.
"""

logger = logging.getLogger(__name__)

Oracle = Callable[[np.ndarray], np.ndarray]

# max |d^3/dz^3 log(1 + exp(-z))| = max |sigma''(z)| = 1/(6*sqrt(3))
LOGISTIC_THIRD_DERIVATIVE = 1.0 / (6.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class Target:
    dimension: int
    gradient: Oracle = field(repr=False)
    value: Oracle = field(repr=False)
    m: float
    L: float
    L1: Optional[float] = None
    kind: str = "custom"
    precision: Optional[np.ndarray] = field(default=None, repr=False)
    minimizer: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidTargetError("Target dimension must be positive")
        if not (0.0 < self.m <= self.L):
            raise InvalidTargetError(f"Need 0 < m <= L, got m={self.m}, L={self.L}")
        if self.L1 is not None and self.L1 < 0:
            raise InvalidTargetError("L1 must be nonnegative")

    @property
    def kappa(self) -> float:
        return self.L / self.m


def make_gaussian_target(spectrum: Sequence[float],
                         rotation: Optional[np.ndarray] = None) -> Target:
    spectrum = np.asarray(spectrum, dtype=float).ravel()
    if spectrum.size == 0:
        raise InvalidTargetError("Spectrum must be nonempty")
    if not np.all(np.isfinite(spectrum)) or np.any(spectrum <= 0):
        raise InvalidTargetError("Spectrum entries must be positive")

    d = spectrum.size
    if rotation is None:
        precision = np.diag(spectrum)
    else:
        rotation = np.asarray(rotation, dtype=float)
        if rotation.shape != (d, d) or not np.allclose(rotation @ rotation.T, np.eye(d), atol=1e-10):
            raise InvalidTargetError("Rotation must be an orthogonal d x d matrix")
        precision = (rotation * spectrum) @ rotation.T
        precision = 0.5 * (precision + precision.T)
    precision = frozen_array(precision)

    def gradient(x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ precision

    def value(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * (x @ precision), axis=-1)

    return Target(
        dimension=d,
        gradient=gradient,
        value=value,
        m=float(spectrum.min()),
        L=float(spectrum.max()),
        L1=0.0,
        kind="gaussian",
        precision=precision,
        minimizer=frozen_array(np.zeros(d)),
    )


def make_ridge_logistic_target(features: np.ndarray, labels: np.ndarray, ridge: float) -> Target:
    features = np.array(features, dtype=float, ndmin=2)
    labels = np.asarray(labels, dtype=float).ravel()
    if not ridge > 0:
        raise InvalidTargetError(f"Ridge must be positive, got {ridge}")
    if features.ndim != 2 or features.shape[1] < 1:
        raise InvalidTargetError("Features must be an n x d matrix with d >= 1")
    if not np.all(np.isfinite(features)):
        raise InvalidTargetError("Features must be finite")
    if labels.shape[0] != features.shape[0]:
        raise InvalidTargetError("One label per feature row is required")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise InvalidTargetError("Labels must be +1 or -1")

    features = frozen_array(features)
    labels = frozen_array(labels)
    n, d = features.shape

    def margins(x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) @ features.T) * labels

    def value(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        loss = np.logaddexp(0.0, -margins(x)).sum(axis=-1)
        return loss + 0.5 * ridge * np.sum(x * x, axis=-1)

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        weights = expit(-margins(x)) * labels
        return -(weights @ features) + ridge * x

    # loose but explicit: sigma' <= 1/4 gives the curvature bound
    curvature = 0.25 * float(linalg.eigvalsh(features.T @ features)[-1]) if n else 0.0
    l1 = LOGISTIC_THIRD_DERIVATIVE * float(np.sum(np.linalg.norm(features, axis=1) ** 3))
    logger.debug("ridge-logistic target", extra={"n": n, "d": d, "L": ridge + curvature, "L1": l1})

    return Target(
        dimension=d,
        gradient=gradient,
        value=value,
        m=float(ridge),
        L=float(ridge + curvature),
        L1=l1,
        kind="ridge-logistic",
    )


@dataclass_json
@dataclass(frozen=True)
class ProbeReport:
    m_hat: float
    L_hat: float
    declared_m: float
    declared_L: float
    violated: bool
    worst_quotient: float
    worst_x: np.ndarray = ndarray_field()
    worst_y: np.ndarray = ndarray_field()


def probe_constants(target: Target, samples: int, radius: float = 1.0,
                    seed: int = 0, tolerance: float = PROBE_TOLERANCE) -> ProbeReport:
    if samples < 2:
        raise InvalidParameterError("At least two sample pairs are required")
    if not radius > 0:
        raise InvalidParameterError("Sampling radius must be positive")

    rng = np.random.default_rng(seed)
    x = radius * rng.standard_normal((samples, target.dimension))
    y = radius * rng.standard_normal((samples, target.dimension))
    diff = x - y
    quotient = np.sum((target.gradient(x) - target.gradient(y)) * diff, axis=-1) / np.sum(diff * diff, axis=-1)

    excess = np.maximum(target.m - quotient, quotient - target.L)
    worst = int(np.argmax(excess))
    report = ProbeReport(
        m_hat=float(quotient.min()),
        L_hat=float(quotient.max()),
        declared_m=target.m,
        declared_L=target.L,
        violated=bool(excess[worst] > tolerance),
        worst_quotient=float(quotient[worst]),
        worst_x=frozen_array(x[worst]),
        worst_y=frozen_array(y[worst]),
    )
    if report.violated:
        logger.warning("declared constants violated", extra={"m_hat": report.m_hat, "L_hat": report.L_hat})
    return report


def gradient_check(target: Target, x: np.ndarray, eps: float = 1e-5) -> float:
    """Largest gap between central differences of value() and gradient() at x."""
    x = np.asarray(x, dtype=float)
    steps = eps * np.eye(target.dimension)
    numeric = (target.value(x + steps) - target.value(x - steps)) / (2.0 * eps)
    return float(np.max(np.abs(numeric - target.gradient(x))))


class TargetLoader:
    @staticmethod
    def load_logistic_csv(file_path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
        data = np.loadtxt(file_path, delimiter=",", ndmin=2, comments="#")
        if data.shape[1] < 2:
            raise InvalidTargetError("Need at least one feature column and a label column")
        return data[:, :-1], data[:, -1]

    @staticmethod
    def load_logistic_target(file_path: Union[str, Path], ridge: float) -> Target:
        features, labels = TargetLoader.load_logistic_csv(file_path)
        return make_ridge_logistic_target(features, labels, ridge)
