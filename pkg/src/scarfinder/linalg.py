"""Dense complex linear-algebra primitives.

Storage convention used throughout the package: arrays are numpy C-ordered
(row-major).  Operators on several sites are written in the Kronecker order
of the sites, the leftmost site being the most significant index, so a
two-site operator ``O[(s0 s1), (t0 t1)]`` is ``np.kron(A, B)`` for ``A`` on
site 0 and ``B`` on site 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import ConvergenceError, InvalidInputError

DENSE_EIG_MAX_DIM = 256
EIG_MAX_ITER = 10_000


@dataclass(frozen=True)
class TruncatedSVD:
    """Result of :func:`svd_truncate`: ``m ≈ left @ diag(values) @ right``."""

    left: np.ndarray
    values: np.ndarray
    right: np.ndarray
    discarded_weight: float

    @property
    def rank(self) -> int:
        return len(self.values)


def _check_finite(m):
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")


def _fix_left_phase(u, vh):
    # Rotate each left singular vector so its largest-magnitude entry is real positive.
    idx = np.argmax(np.abs(u), axis=0)
    pivots = u[idx, np.arange(u.shape[1])]
    phases = np.ones_like(pivots)
    nonzero = np.abs(pivots) > 0
    phases[nonzero] = pivots[nonzero] / np.abs(pivots[nonzero])
    return u * phases.conj()[None, :], vh * phases[:, None]


def svd_truncate(m, chi_max: int, cutoff: float = 0.0) -> TruncatedSVD:
    """Singular value decomposition keeping at most ``chi_max`` values.

    Singular values smaller than ``cutoff`` times the largest one are dropped as
    well.  At least one value is always kept.  ``discarded_weight`` is the sum of
    squares of the dropped values relative to the total sum of squares.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {m.shape}")
    if chi_max < 1:
        raise InvalidInputError("chi_max must be >= 1")
    if cutoff < 0:
        raise InvalidInputError("cutoff must be >= 0")
    _check_finite(m)
    try:
        u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    total = float(np.sum(s**2))
    keep = min(chi_max, len(s))
    if len(s) and s[0] > 0:
        keep = min(keep, max(1, int(np.sum(s > cutoff * s[0]))))
    keep = max(keep, 1)
    dropped = float(np.sum(s[keep:] ** 2))
    u, vh = _fix_left_phase(u[:, :keep], vh[:keep, :])
    return TruncatedSVD(u, s[:keep], vh, dropped / total if total > 0 else 0.0)


def matrix_exponential(h, scalar: complex = 1.0) -> np.ndarray:
    """Return ``exp(scalar * h)`` (Padé approximant with scaling and squaring)."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise InvalidInputError(f"matrix_exponential needs a square matrix, got {h.shape}")
    _check_finite(h)
    return scipy.linalg.expm(scalar * h.astype(complex))


def _select_dominant(values, tol):
    mags = np.abs(values)
    top = mags.max()
    candidates = np.flatnonzero(mags >= top * (1.0 - tol) - tol * 1e-300)
    # Ties in magnitude: the smallest phase angle in [0, 2π) wins.
    angles = np.mod(np.angle(values[candidates]), 2 * np.pi)
    angles[np.isclose(angles, 2 * np.pi, atol=1e-12)] = 0.0
    return candidates[np.argmin(angles)]


def dominant_eigenvalue(m, tol: float = 1e-12) -> complex:
    """Eigenvalue of largest magnitude.

    Dense solve up to dimension 256, implicitly restarted Arnoldi above.  When
    several eigenvalues share the largest magnitude within ``tol`` (relative),
    the one with the smallest phase angle in ``[0, 2π)`` is returned.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"dominant_eigenvalue needs a square matrix, got {m.shape}")
    _check_finite(m)
    n = m.shape[0]
    if n <= DENSE_EIG_MAX_DIM:
        values = scipy.linalg.eigvals(m)
    else:
        k = min(6, n - 2)
        try:
            values = scipy.sparse.linalg.eigs(
                m, k=k, which="LM", tol=tol, maxiter=EIG_MAX_ITER, return_eigenvectors=False
            )
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise ConvergenceError(
                "dominant eigenvalue did not converge", iterations=EIG_MAX_ITER
            ) from exc
    return complex(values[_select_dominant(values, tol)])


def dominant_eigenpair(op, v0=None, tol: float = 1e-13):
    """Dominant eigenpair of a dense matrix or a ``scipy`` ``LinearOperator``.

    Returns ``(value, vector)`` with a unit-norm vector.  Dense arrays are solved
    directly; linear operators go through ARPACK with one requested eigenvalue.
    """
    if isinstance(op, np.ndarray):
        values, vectors = scipy.linalg.eig(op)
        i = _select_dominant(values, 1e-12)
        v = vectors[:, i]
        return complex(values[i]), v / np.linalg.norm(v)
    n = op.shape[0]
    if n <= 2:
        dense = op @ np.eye(n, dtype=complex)
        return dominant_eigenpair(np.asarray(dense), tol=tol)
    try:
        values, vectors = scipy.sparse.linalg.eigs(
            op, k=1, which="LM", v0=v0, tol=tol, maxiter=EIG_MAX_ITER
        )
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        raise ConvergenceError(
            "dominant eigenpair did not converge", iterations=EIG_MAX_ITER
        ) from exc
    v = vectors[:, 0]
    return complex(values[0]), v / np.linalg.norm(v)


def von_neumann_entropy(schmidt_values) -> float:
    """``-Σ p ln p`` with ``p = λ²`` normalized to unit sum (natural log)."""
    p = np.asarray(schmidt_values, dtype=float) ** 2
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p[p > 1e-300] / total
    return float(-np.sum(p * np.log(p)))
