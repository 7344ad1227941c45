"""Logistic-regression propensity score fitted by maximum likelihood."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .data_model import Dataset, augment
from .errors import NumericalError, SeparationError

DEFAULT_CLIP = 0.01
DIVERGENCE_NORM = 1e3


@dataclass(frozen=True)
class PropensityFit:
    """Fitted coefficients on the augmented covariates ``(1, x[cols])``.

    ``cols`` selects the covariates entering the model; ``None`` means all.
    """

    gamma: np.ndarray
    clip_eps: float = DEFAULT_CLIP
    converged: bool = True
    iterations: int = 0
    cols: Optional[tuple[int, ...]] = None

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.cols is not None:
            x = x[..., list(self.cols)]
        return augment(x)

    def linear_predictor(self, x) -> np.ndarray:
        return self.design(x) @ self.gamma

    def __call__(self, x) -> np.ndarray:
        return np.clip(expit(self.linear_predictor(x)), self.clip_eps, 1 - self.clip_eps)


def evaluate(fit: PropensityFit, x) -> float:
    """Clipped propensity ``min(max(expit(g'x~), eps), 1 - eps)`` at one point."""
    return float(fit(np.asarray(x, dtype=float)))


def log_likelihood(gamma: np.ndarray, design: np.ndarray, a: np.ndarray) -> float:
    eta = design @ gamma
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def fit_propensity(
    ds: Dataset,
    clip_eps: float = DEFAULT_CLIP,
    max_iter: int = 100,
    tol: float = 1e-10,
    cols: Optional[Sequence[int]] = None,
) -> PropensityFit:
    """Newton-Raphson on the Bernoulli log-likelihood, starting at zero.

    A full Newton step is halved until the log-likelihood does not
    decrease.  Convergence means ``max|score| <= tol * n``.

    Raises
    ------
    SeparationError
        If the coefficients run off past ``DIVERGENCE_NORM`` (perfect or
        quasi-complete separation).
    NumericalError
        If the information matrix is singular.
    """
    if not 0 < clip_eps < 0.5:
        raise ValueError("clip_eps must lie in (0, 0.5)")
    cols = None if cols is None else tuple(int(c) for c in cols)
    x = ds.x if cols is None else ds.x[:, list(cols)]
    design = augment(x)
    a = ds.a.astype(float)
    n, k = design.shape

    gamma = np.zeros(k)
    ll = log_likelihood(gamma, design, a)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(design @ gamma)
        score = design.T @ (a - prob)
        if np.max(np.abs(score)) <= tol * n:
            converged = True
            it -= 1
            break
        info = (design * (prob * (1 - prob))[:, None]).T @ design
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix in propensity fit") from None
        if not np.all(np.isfinite(step)):
            raise NumericalError("singular information matrix in propensity fit")
        t = 1.0
        while True:
            cand = gamma + t * step
            ll_cand = log_likelihood(cand, design, a)
            if ll_cand >= ll or t < 1e-10:
                break
            t *= 0.5
        gamma, ll = cand, ll_cand
        if np.linalg.norm(gamma) > DIVERGENCE_NORM:
            raise SeparationError(
                "propensity coefficients diverged (treatment is separated by the covariates); "
                "use fewer propensity covariates or a regularized model"
            )
    else:
        prob = expit(design @ gamma)
        converged = bool(np.max(np.abs(design.T @ (a - prob))) <= tol * n)

    # the score can vanish numerically at a finite point on the way to
    # infinity; a predictor that classifies every subject proves separation
    eta = design @ gamma
    if np.all(eta[a == 1] > 0) and np.all(eta[a == 0] < 0):
        raise SeparationError(
            "treatment is perfectly separated by the propensity covariates; "
            "use fewer propensity covariates or a regularized model"
        )

    return PropensityFit(gamma=gamma, clip_eps=clip_eps, converged=converged, iterations=it, cols=cols)
