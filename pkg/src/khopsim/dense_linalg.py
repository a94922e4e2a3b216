"""Dense symmetric kernels backing the observer mathematics.

All spectral quantities used by the gain inequalities (lambda_min/lambda_max
of coupling matrices, norms of Kronecker factors, definiteness tests) are
computed here so that the numerical tolerances live in exactly one place.

The eigensolver is a cyclic Jacobi iteration: the matrices involved are
small (a handful of rows per agent), symmetric, and Jacobi delivers an
orthonormal eigenbasis as a by-product of the rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

# Centralized tolerances. Verification code must reference these named
# constants rather than re-inventing thresholds.
SYMMETRY_RTOL = 1e-12       # allowed |a_ij - a_ji|, relative to max(1, |a_ij|)
JACOBI_RTOL = 1e-12         # off-diagonal threshold, relative to Frobenius norm
ORTHONORMALITY_TOL = 1e-10  # contract bound on ||V^T V - I||_max
DEFINITENESS_TOL = 1e-9     # eigenvalue margin for definiteness decisions

_MAX_SWEEPS = 64


@dataclass(frozen=True)
class SymMatrix:
    """Real symmetric matrix, validated on construction."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NumericalError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericalError("matrix contains non-finite entries")
        scale = np.maximum(1.0, np.abs(a))
        if np.any(np.abs(a - a.T) > SYMMETRY_RTOL * scale):
            raise NumericalError("matrix is not symmetric within tolerance")
        a = 0.5 * (a + a.T)  # kill representation-level asymmetry
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def _as_sym(m) -> np.ndarray:
    if isinstance(m, SymMatrix):
        return m.entries
    return SymMatrix(np.asarray(m, dtype=float)).entries


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, V)`` with eigenvalues ``w`` sorted ascending and
    orthonormal eigenvector columns satisfying ``A = V diag(w) V^T``.
    Iteration stops once every off-diagonal entry is below
    ``JACOBI_RTOL`` relative to the Frobenius norm of the input.
    """
    a = _as_sym(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n > 1:
        fro = float(np.sqrt(np.sum(a * a)))
        thresh = JACOBI_RTOL * max(fro, np.finfo(float).tiny)
        for _ in range(_MAX_SWEEPS):
            off = np.abs(a - np.diag(np.diag(a))).max()
            if off <= thresh:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) <= thresh:
                        continue
                    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if tau >= 0.0:
                        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    # a <- G^T a G with the Givens rotation in the (p, q) plane
                    rp, rq = a[p, :].copy(), a[q, :].copy()
                    a[p, :] = c * rp - s * rq
                    a[q, :] = s * rp + c * rq
                    cp, cq = a[:, p].copy(), a[:, q].copy()
                    a[:, p] = c * cp - s * cq
                    a[:, q] = s * cp + c * cq
                    vp, vq = v[:, p].copy(), v[:, q].copy()
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq
        else:
            raise NumericalError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def kron(a, b) -> np.ndarray:
    """Kronecker product; satisfies (A (x) B)(C (x) D) = (AC) (x) (BD)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def spectral_norm(m) -> float:
    """Largest singular value. Equals lambda_max for symmetric PSD input."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise NumericalError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite entries")
    if a.size == 0:
        return 0.0
    gram = a.T @ a
    w, _ = sym_eig(0.5 * (gram + gram.T))
    return float(np.sqrt(max(w[-1], 0.0)))


def is_negative_definite(m, tol: float = DEFINITENESS_TOL) -> bool:
    """True iff the symmetric part of ``m`` has lambda_max < -tol."""
    a = np.asarray(m, dtype=float)
    w, _ = sym_eig(0.5 * (a + a.T))
    return bool(w[-1] < -tol)
