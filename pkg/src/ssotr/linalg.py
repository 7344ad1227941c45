"""Small dense least-squares solves with explicit rank checking."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import RankDeficientError

RANK_RTOL = 1e-10


def least_squares(
    design: np.ndarray,
    target: np.ndarray,
    weights: Optional[np.ndarray] = None,
    names: Optional[Sequence[str]] = None,
) -> np.ndarray:
    """Minimize ``sum_i w_i (t_i - b'x_i)^2`` by pivoted QR.

    Raises :class:`RankDeficientError` instead of returning a minimum-norm
    solution when the (weighted) design loses rank at relative tolerance
    ``RANK_RTOL``.
    """
    design = np.asarray(design, dtype=float)
    target = np.asarray(target, dtype=float)
    if weights is not None:
        root = np.sqrt(np.asarray(weights, dtype=float))
        design = design * root[:, None]
        target = target * root
    m, k = design.shape
    if m < k:
        raise RankDeficientError(f"design has {m} effective rows for {k} coefficients")
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    small = diag <= RANK_RTOL * diag[0]
    if diag[0] == 0 or small[-1]:
        # pivoting sorts |R_ii| decreasingly; the first small one is the culprit
        bad = int(piv[np.argmax(small)])
        label = names[bad] if names is not None else f"column {bad}"
        raise RankDeficientError(f"design matrix is rank deficient: {label} is linearly dependent on the others")
    coef = np.empty(k)
    coef[piv] = scipy.linalg.solve_triangular(r, q.T @ target)
    return coef


def gram_inverse(design: np.ndarray, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Inverse of ``n^-1 X'X``, with the same rank check as :func:`least_squares`."""
    design = np.asarray(design, dtype=float)
    n, k = design.shape
    if n < k:
        raise RankDeficientError(f"design has {n} rows for {k} coefficients")
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0 or diag[-1] <= RANK_RTOL * diag[0]:
        label = names[int(piv[-1])] if names is not None else f"column {int(piv[-1])}"
        raise RankDeficientError(f"design matrix is rank deficient: {label} is linearly dependent on the others")
    rinv = scipy.linalg.solve_triangular(r, np.eye(k))
    inv = np.empty((k, k))
    # (X'X)^-1 = P R^-1 R^-T P'
    inv[np.ix_(piv, piv)] = rinv @ rinv.T
    return n * inv
