"""Small dense linear-algebra helpers for N-hat x N-hat problems.

Everything here accepts a leading batch dimension, so an H sweep evaluates
all grid points in one call. The 2x2 generalized eigenvalues are computed from
the characteristic polynomial with compensated (Dekker) determinants: near
kappa = 1e9 the smallest eigenvalue is ~1e-9 against entries of order 1, and
naive products lose seven digits there.
"""
import numpy as np
from scipy import linalg

_SPLITTER = 134217729.0  # 2**27 + 1


def _split(a: np.ndarray):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def two_product(a, b):
    """Return (p, e) with p = fl(a*b) and p + e == a*b exactly."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def det2(a, b, c, d):
    """a*d - b*c with one rounding error on the result."""
    p1, e1 = two_product(a, d)
    p2, e2 = two_product(b, c)
    return (p1 - p2) + (e1 - e2)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def generalized_eigvals_2x2(z: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Roots of det(Z - lam P) = 0 for symmetric Z and SPD P, sorted ascending.

    Shapes (..., 2, 2) -> (..., 2).
    """
    z11, z12, z22 = z[..., 0, 0], 0.5 * (z[..., 0, 1] + z[..., 1, 0]), z[..., 1, 1]
    p11, p12, p22 = p[..., 0, 0], 0.5 * (p[..., 0, 1] + p[..., 1, 0]), p[..., 1, 1]

    det_p = det2(p11, p12, p12, p22)
    det_z = det2(z11, z12, z12, z22)
    trace = z11 * p22 + z22 * p11 - 2.0 * z12 * p12
    disc = np.maximum(trace * trace - 4.0 * det_p * det_z, 0.0)

    # stable quadratic formula: big root by addition, small root by Vieta
    big = (trace + np.copysign(np.sqrt(disc), trace)) / (2.0 * det_p)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0.0, det_z / (det_p * big), 0.0)
    return np.sort(np.stack([small, big], axis=-1), axis=-1)


def generalized_eigvals_cholesky(z: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Eigenvalues of L^-1 Z L^-T with P = L L^T, any size, sorted ascending."""
    chol = np.linalg.cholesky(p)
    left = np.linalg.solve(chol, z)
    reduced = np.linalg.solve(chol, np.swapaxes(left, -1, -2))
    return np.linalg.eigvalsh(symmetrize(reduced))


def generalized_eigvals(z: np.ndarray, p: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    n = z.shape[-1]
    if n == 1:
        return (z / p)[..., 0]
    if n == 2:
        return generalized_eigvals_2x2(z, p)
    return generalized_eigvals_cholesky(z, p)


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a psd matrix via eigh, negative eigenvalues clipped."""
    w, v = linalg.eigh(symmetrize(np.asarray(a, dtype=float)))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def is_symmetric(a: np.ndarray, tol: float) -> bool:
    a = np.asarray(a, dtype=float)
    return a.ndim == 2 and a.shape[0] == a.shape[1] and bool(np.allclose(a, a.T, rtol=0.0, atol=tol))

