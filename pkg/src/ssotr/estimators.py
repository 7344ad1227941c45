"""Linear treatment-regime estimators with influence-function inference.

Three estimators of the coefficients ``beta`` of the linear rule
``d(x) = 1{beta'(1, x) > 0}``:

``tr``
    least squares of the inverse-propensity transformed response on the
    labeled covariates;
``np``
    least squares, over the unlabeled covariates, of the contrast imputed
    by a kernel regression fit to the labeled data;
``ss``
    as ``np`` but the imputation averages K fold-excluded kernel fits and
    adds an inverse-propensity weighted linear correction per arm.

Each returns a :class:`RegimeFit` whose ``cov`` is the plug-in estimate
``n^-1 * mean(psi psi')`` built from per-subject influence values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, ndtri

from .data_model import Dataset, augment
from .errors import DataError
from .kernel_regression import (
    QSurface,
    bandwidth_rule_flags,
    fit_folded,
    fit_surface,
    folded_mean,
    held_out_predictions,
    loo_predictions,
    select_bandwidth,
)
from .linalg import gram_inverse, least_squares
from .propensity import DEFAULT_CLIP, PropensityFit, fit_propensity

METHODS = ("tr", "np", "ss")


@dataclass
class RegimeFit:
    """Coefficients, covariance and influence values of one estimator.

    Coefficients live on the scale of the covariates the model was fitted
    on; ``center``/``scale`` map raw inputs to that scale (see
    :meth:`raw_scale`).
    """

    method: str
    beta: np.ndarray
    cov: np.ndarray
    influence: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    theta1: Optional[np.ndarray] = None
    theta0: Optional[np.ndarray] = None
    bandwidth: Optional[float] = None
    K: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def ci95(self) -> np.ndarray:
        return wald_ci(self, 0.95)

    @property
    def n(self) -> int:
        return self.influence.shape[0]

    def raw_transform(self) -> np.ndarray:
        """Matrix T with ``beta_raw = T beta`` for rules applied to raw inputs."""
        k = self.beta.size
        t = np.eye(k)
        t[0, 1:] = -self.center / self.scale
        t[np.arange(1, k), np.arange(1, k)] = 1.0 / self.scale
        return t

    def raw_scale(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients and covariance for the rule written in raw covariates."""
        t = self.raw_transform()
        return t @ self.beta, t @ self.cov @ t.T

    def rule(self) -> "DecisionRule":
        return DecisionRule(self.beta.copy(), self.center.copy(), self.scale.copy())


@dataclass(frozen=True)
class DecisionRule:
    beta: np.ndarray
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def index(self, x_raw) -> np.ndarray:
        x = np.asarray(x_raw, dtype=float)
        if self.center is not None:
            x = (x - self.center) / self.scale
        if x.shape[-1] != self.beta.size - 1:
            raise DataError(f"dimension mismatch: rule expects p={self.beta.size - 1} covariates")
        return augment(x) @ self.beta

    def __call__(self, x_raw) -> np.ndarray:
        # strict inequality: an exact tie assigns treatment 0
        return (self.index(x_raw) > 0).astype(np.int8)


def decide(rule: DecisionRule, x_raw) -> int:
    return int(rule(np.asarray(x_raw, dtype=float).reshape(1, -1))[0])


def normal_quantile(prob: float) -> float:
    return float(ndtri(prob))


def wald_ci(fit: RegimeFit, level: float = 0.95) -> np.ndarray:
    """``beta_j -/+ z se_j`` as a (p+1, 2) array of (lo, hi)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = normal_quantile(0.5 * (1 + level))
    se = fit.se
    return np.column_stack([fit.beta - z * se, fit.beta + z * se])


def transformed_response(y, a, pi_hat):
    """``Y (A - pi) / (pi (1 - pi))``; conditional mean is the contrast."""
    return y * (a - pi_hat) / (pi_hat * (1 - pi_hat))


def _names(ds: Dataset) -> list[str]:
    return ["intercept", *ds.columns]


def _require_labeled_size(ds: Dataset) -> None:
    if ds.n < ds.p + 2:
        raise DataError(f"need at least p+2={ds.p + 2} labeled observations, got {ds.n}")


def _require_unlabeled(ds: Dataset, method: str) -> None:
    if ds.N == 0:
        raise DataError(f"{method} requires unlabeled data; use the tr estimator for labeled-only data")
    if ds.N < ds.p + 2:
        raise DataError(f"need at least p+2={ds.p + 2} unlabeled observations, got {ds.N}")


def _covariance(psi: np.ndarray) -> np.ndarray:
    n = psi.shape[0]
    v = psi.T @ psi / n
    v = 0.5 * (v + v.T)
    return v / n


def _propensity_adjustment(ds: Dataset, prop: PropensityFit, design: np.ndarray) -> np.ndarray:
    """Per-subject term ``M I^-1 S_i`` carrying the logistic fit's sampling
    error into the transformed-response estimator.

    ``S_i`` is the logistic score, ``I`` its information and ``M`` the mean
    derivative of ``x~ Ytilde`` in the logistic coefficients.  Subjects whose
    propensity is clipped contribute no derivative.
    """
    zp = prop.design(ds.x)
    a = ds.a.astype(float)
    pi = expit(zp @ prop.gamma)
    inside = (pi >= prop.clip_eps) & (pi <= 1 - prop.clip_eps)
    # d Ytilde / d eta = -Y [A (1 - pi) / pi + (1 - A) pi / (1 - pi)]
    dy = -ds.y * (a * (1 - pi) / pi + (1 - a) * pi / (1 - pi)) * inside
    n = ds.n
    m = (design * dy[:, None]).T @ zp / n
    info = (zp * (pi * (1 - pi))[:, None]).T @ zp / n
    score = zp * (a - pi)[:, None]
    return score @ np.linalg.solve(info, m.T)


def fit_tr(ds: Dataset, prop: PropensityFit, adjust_propensity: bool = True) -> RegimeFit:
    """Transformed-response estimator on the labeled data only.

    Influence values are ``Lambda^-1 [x~_i (Ytilde_i - beta'x~_i) + M I^-1 S_i]``;
    the second term accounts for the propensity having been estimated by
    logistic maximum likelihood.  With ``adjust_propensity=False`` it is
    dropped, which treats the propensity as known and overstates the
    variance of the intercept in particular.
    """
    _require_labeled_size(ds)
    design = augment(ds.x)
    pi_hat = prop(ds.x)
    ytil = transformed_response(ds.y, ds.a, pi_hat)
    names = _names(ds)
    beta = least_squares(design, ytil, names=names)
    lam_inv = gram_inverse(design, names)
    resid = ytil - design @ beta
    core = design * resid[:, None]
    if adjust_propensity:
        core = core + _propensity_adjustment(ds, prop, design)
    psi = core @ lam_inv.T
    return RegimeFit(
        method="tr",
        beta=beta,
        cov=_covariance(psi),
        influence=psi,
        center=ds.center.copy(),
        scale=ds.scale.copy(),
        diagnostics={
            "pi_range": [float(pi_hat.min()), float(pi_hat.max())],
            "propensity_adjusted": adjust_propensity,
        },
    )


def _ipw_sign(a: np.ndarray, pi_hat: np.ndarray) -> np.ndarray:
    return a / pi_hat - (1 - a) / (1 - pi_hat)


def _imputation_fit(ds: Dataset, contrast: np.ndarray, resid: np.ndarray, prop: PropensityFit, method: str, **extra) -> RegimeFit:
    design_u = augment(ds.x_unlabeled)
    names = _names(ds)
    beta = least_squares(design_u, contrast, names=names)
    lam_inv = gram_inverse(design_u, names)
    pi_hat = prop(ds.x)
    weight = _ipw_sign(ds.a.astype(float), pi_hat) * resid
    psi = (augment(ds.x) * weight[:, None]) @ lam_inv.T
    return RegimeFit(
        method=method,
        beta=beta,
        cov=_covariance(psi),
        influence=psi,
        center=ds.center.copy(),
        scale=ds.scale.copy(),
        **extra,
    )


def fit_np(ds: Dataset, surface: QSurface, prop: PropensityFit, folded: Optional[Sequence[QSurface]] = None) -> RegimeFit:
    """Regress the kernel-imputed contrast on the unlabeled covariates.

    Influence residuals ``Y_i - Q(X_i, A_i)`` are evaluated without the
    subject's own outcome: on the fold-excluded surface when ``folded`` is
    given, otherwise leave-one-out on ``surface``.
    """
    _require_labeled_size(ds)
    _require_unlabeled(ds, "np")
    contrast = surface.contrast(ds.x_unlabeled)
    q_lab = held_out_predictions(folded) if folded is not None else loo_predictions(surface)
    return _imputation_fit(
        ds, contrast, ds.y - q_lab, prop, "np", bandwidth=surface.bandwidth,
        K=len(folded) if folded is not None else None,
    )


def refit_theta(ds: Dataset, folded: Sequence[QSurface], prop: PropensityFit, arm: int, q_held=None) -> np.ndarray:
    """Inverse-propensity weighted least squares of the arm-``arm``
    cross-fitted residuals ``Y_i - Q_{-k(i)}(X_i, A_i)`` on ``(1, X_i)``."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if q_held is None:
        q_held = held_out_predictions(folded)
    a = ds.a.astype(float)
    pi_hat = prop(ds.x)
    weights = a / pi_hat if arm == 1 else (1 - a) / (1 - pi_hat)
    sel = ds.a == arm
    names = _names(ds)
    return least_squares(augment(ds.x[sel]), (ds.y - q_held)[sel], weights[sel], names=names)


def ss_q(folded: Sequence[QSurface], theta: np.ndarray, xq, arm: int) -> np.ndarray:
    """Fold-averaged kernel fit plus the linear correction ``theta'(1, x)``."""
    return folded_mean(folded, xq, arm) + augment(np.atleast_2d(xq)) @ theta


def fit_ss(ds: Dataset, folded: Sequence[QSurface], prop: PropensityFit) -> RegimeFit:
    """Cross-fitted semi-supervised estimator.

    Influence residuals use, for each labeled subject, the surface that
    excludes its fold plus the refitted correction of its observed arm.
    """
    _require_labeled_size(ds)
    _require_unlabeled(ds, "ss")
    q_held = held_out_predictions(folded)
    theta1 = refit_theta(ds, folded, prop, 1, q_held)
    theta0 = refit_theta(ds, folded, prop, 0, q_held)
    contrast = ss_q(folded, theta1, ds.x_unlabeled, 1) - ss_q(folded, theta0, ds.x_unlabeled, 0)
    design = augment(ds.x)
    correction = np.where(ds.a == 1, design @ theta1, design @ theta0)
    resid = ds.y - q_held - correction
    return _imputation_fit(
        ds, contrast, resid, prop, "ss",
        theta1=theta1, theta0=theta0, bandwidth=folded[0].bandwidth, K=len(folded),
    )


def normal_equation_residual(design: np.ndarray, target: np.ndarray, beta: np.ndarray) -> float:
    """``max |X'(t - X beta)|``: zero at an exact least-squares solution."""
    return float(np.max(np.abs(design.T @ (target - design @ beta))))


def estimate(
    ds: Dataset,
    method: str = "ss",
    K: int = 5,
    bandwidth="auto",
    seed: int = 0,
    clip_eps: float = DEFAULT_CLIP,
    propensity_cols: Optional[Sequence[int]] = None,
    grid=None,
    prop: Optional[PropensityFit] = None,
) -> RegimeFit:
    """Full pipeline on an (already standardized) dataset.

    Fits the propensity model unless one is passed in, picks the bandwidth
    by cross-validation when ``bandwidth == "auto"``, and runs ``method``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if prop is None:
        prop = fit_propensity(ds, clip_eps=clip_eps, cols=propensity_cols)
    if method == "tr":
        fit = fit_tr(ds, prop)
    else:
        _require_unlabeled(ds, method)
        if bandwidth == "auto":
            h = select_bandwidth(ds, folds=K, grid=grid, seed=seed)
        else:
            h = float(bandwidth)
        folded = fit_folded(ds, h, K, seed)
        if method == "np":
            fit = fit_np(ds, fit_surface(ds, h), prop, folded)
        else:
            fit = fit_ss(ds, folded, prop)
        fit.diagnostics["bandwidth_rule_flags"] = bandwidth_rule_flags(ds.n, ds.p, h)
    fit.diagnostics["propensity_gamma"] = prop.gamma.tolist()
    fit.diagnostics["propensity_converged"] = prop.converged
    return fit
