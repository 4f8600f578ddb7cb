import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from dataclasses_json import dataclass_json
from scipy import linalg

from .errors import InvalidParameterError
from ..utils.linalg import is_symmetric, symmetrize
from ..utils.serialization import frozen_array, ndarray_field, write_atomic
from ..utils.settings import DEFAULT_GAMMA, PSD_TOLERANCE, RELATION_TOLERANCE, SKEW_TOLERANCE

"""
Approach:

-> Langevin dynamics are written as a linear system driven by the gradient:

       d xi = A xi dt + B grad f(C xi) dt + sigma dW

   with every matrix of Kronecker form  A_hat (x) I_d. Only the small "hat"
   matrices are stored; the d-dimensional lift is never built for analysis.
-> exp(-f(C xi) - 0.5 xi^T S xi) is invariant when four algebraic relations
   hold (D = 0.5 sigma sigma^T):

       Tr(A + D S)               = 0
       C B + C D C^T             = 0
       C A + B^T S + 2 C D S     = 0
       S A + A^T S + 2 S D S     = 0

   and S C^T = 0 makes the x-marginal exactly exp(-f).
-> Any D, S psd and R skew give a valid model through A = -(D+R)S, B = -(D+R)C^T.

Example:

    underdamped, gamma = 2, c = 0.5   (xi = (v, x))
        A = [[-2, 0], [1, 0]]   B = [[-0.5], [0]]   C = [[0, 1]]
        sigma = [[sqrt(2)], [0]]   D = diag(1, 0)   S = diag(2, 0)
        Tr(A + D S) = -2 + 2 = 0, the other residuals vanish the same way.

    overdamped, c = 1   (xi = x)
        A = 0, B = -1, C = 1, sigma = sqrt(2), D = 1, S = 0
"""

logger = logging.getLogger(__name__)


@dataclass_json
@dataclass(frozen=True)
class HatModel:
    kind: str
    gamma: float
    c: float
    A: np.ndarray = ndarray_field()
    B: np.ndarray = ndarray_field()
    C: np.ndarray = ndarray_field()
    sigma: np.ndarray = ndarray_field()
    S: np.ndarray = ndarray_field()

    def __post_init__(self):
        n = np.shape(self.A)[0]
        shapes = {"A": (n, n), "B": (n, 1), "C": (1, n), "S": (n, n)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise InvalidParameterError(f"{name} must have shape {shape}, got {np.shape(getattr(self, name))}")
        if np.ndim(self.sigma) != 2 or np.shape(self.sigma)[0] != n:
            raise InvalidParameterError("sigma must have N-hat rows")

    @property
    def N(self) -> int:
        return int(np.shape(self.A)[0])

    @property
    def D(self) -> np.ndarray:
        sigma = np.asarray(self.sigma)
        return 0.5 * sigma @ sigma.T


@dataclass_json
@dataclass(frozen=True)
class RelationReport:
    trace: float
    output: float
    cross: float
    quadratic: float
    marginal: float
    tolerance: float
    relations_passed: bool   # the four invariance relations, marginal condition excluded
    passed: bool


def make_model(kind: str, gamma: float = DEFAULT_GAMMA, c: float = 1.0) -> HatModel:
    if not c > 0:
        raise InvalidParameterError(f"Force scale c must be positive, got {c}")

    if kind == "overdamped":
        return HatModel(
            kind=kind, gamma=float(gamma), c=float(c),
            A=frozen_array([[0.0]]),
            B=frozen_array([[-c]]),
            C=frozen_array([[1.0]]),
            sigma=frozen_array([[np.sqrt(2.0 * c)]]),
            S=frozen_array([[0.0]]),
        )
    if kind == "underdamped":
        if not gamma > 0:
            raise InvalidParameterError(f"Friction gamma must be positive, got {gamma}")
        return HatModel(
            kind=kind, gamma=float(gamma), c=float(c),
            A=frozen_array([[-gamma, 0.0], [1.0, 0.0]]),
            B=frozen_array([[-c], [0.0]]),
            C=frozen_array([[0.0, 1.0]]),
            sigma=frozen_array([[np.sqrt(2.0 * gamma * c)], [0.0]]),
            S=frozen_array([[1.0 / c, 0.0], [0.0, 0.0]]),
        )
    raise InvalidParameterError(f"Unknown model kind {kind!r}")


def check_invariance_relations(model: HatModel, tolerance: float = RELATION_TOLERANCE) -> RelationReport:
    A, B, C, S, D = (np.asarray(m) for m in (model.A, model.B, model.C, model.S, model.D))

    residuals = {
        "trace": abs(float(np.trace(A + D @ S))),
        "output": float(np.linalg.norm(C @ B + C @ D @ C.T)),
        "cross": float(np.linalg.norm(C @ A + B.T @ S + 2.0 * C @ D @ S)),
        "quadratic": float(np.linalg.norm(S @ A + A.T @ S + 2.0 * S @ D @ S)),
        "marginal": float(np.linalg.norm(S @ C.T)),
    }
    relations_passed = all(value <= tolerance for key, value in residuals.items() if key != "marginal")
    passed = relations_passed and residuals["marginal"] <= tolerance
    if not passed:
        logger.info("invariance relations fail", extra={"kind": model.kind, **residuals})
    return RelationReport(tolerance=tolerance, relations_passed=relations_passed, passed=passed, **residuals)


def _check_psd(name: str, matrix: np.ndarray) -> np.ndarray:
    if not is_symmetric(matrix, PSD_TOLERANCE):
        raise InvalidParameterError(f"{name} must be symmetric")
    matrix = symmetrize(matrix)
    if linalg.eigvalsh(matrix)[0] < -PSD_TOLERANCE:
        raise InvalidParameterError(f"{name} must be positive semidefinite")
    return matrix


def build_from_skew(D: np.ndarray, R: np.ndarray, S: np.ndarray, C: np.ndarray,
                    gamma: float = float("nan"), c: float = float("nan")) -> HatModel:
    D = np.array(D, dtype=float, ndmin=2)
    R = np.array(R, dtype=float, ndmin=2)
    S = np.array(S, dtype=float, ndmin=2)
    C = np.array(C, dtype=float, ndmin=2)
    n = D.shape[0]
    if R.shape != (n, n) or S.shape != (n, n) or C.shape != (1, n):
        raise InvalidParameterError("D, R, S must be N x N and C must be 1 x N")
    if not np.allclose(R, -R.T, rtol=0.0, atol=SKEW_TOLERANCE):
        raise InvalidParameterError("R must be skew-symmetric")
    D = _check_psd("D", D)
    S = _check_psd("S", S)

    A = -(D + R) @ S
    B = -(D + R) @ C.T

    # sigma with 0.5 sigma sigma^T = D, one column per nonzero diffusion direction
    w, v = linalg.eigh(D)
    keep = w > PSD_TOLERANCE
    sigma = v[:, keep] * np.sqrt(2.0 * w[keep]) if keep.any() else np.zeros((n, 1))

    return HatModel(kind="custom", gamma=float(gamma), c=float(c),
                    A=frozen_array(A), B=frozen_array(B), C=frozen_array(C),
                    sigma=frozen_array(sigma), S=frozen_array(S))


def save_model(model: HatModel, file_path: Union[str, Path]) -> Path:
    return write_atomic(file_path, model.to_json(indent=2, sort_keys=True) + "\n")


def load_model(file_path: Union[str, Path]) -> HatModel:
    with open(file_path) as f:
        return HatModel.from_json(f.read())
