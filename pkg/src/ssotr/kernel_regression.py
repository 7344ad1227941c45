"""Product-Gaussian Nadaraya-Watson estimates of the arm-specific Q-functions.

Everything works on the standardized covariate scale with one bandwidth
shared by both arms and all coordinates.  The Gaussian kernel has
unbounded support, so the usual bounded-support smoothness condition for
the asymptotics does not hold literally; it is the kernel used in practice
for this estimator.

When the kernel weight mass of an arm at a query point drops below
``denom_floor`` the estimate falls back to that arm's sample mean, which
keeps every imputation finite and inside the range of the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data_model import Dataset
from .errors import DataError, EmptyArmError

DENOM_FLOOR = 1e-8
_CHUNK = 4096


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float
    denom_floor: float = DENOM_FLOOR
    order: int = 2

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.denom_floor > 0:
            raise ValueError("denom_floor must be positive")


def gaussian_weights(xq: np.ndarray, xt: np.ndarray, h: float) -> np.ndarray:
    """``W((xq_i - xt_j) / h)`` for the product standard-normal density."""
    xq = np.atleast_2d(xq)
    xt = np.atleast_2d(xt)
    p = xt.shape[1]
    d2 = np.zeros((xq.shape[0], xt.shape[0]))
    for k in range(p):
        diff = (xq[:, k, None] - xt[None, :, k]) / h
        d2 += diff * diff
    return np.exp(-0.5 * d2) * (2 * math.pi) ** (-0.5 * p)


@dataclass(frozen=True)
class QSurface:
    """A kernel regression surface for both arms.

    The surface references the full labeled sample; ``active`` selects the
    training points actually used.  Fold-held-out surfaces carry the fold
    assignment and the index of the fold they exclude.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    config: KernelConfig
    active: np.ndarray = field(default=None)
    folds: Optional[np.ndarray] = None
    held_out: Optional[int] = None

    def __post_init__(self):
        if self.active is None:
            object.__setattr__(self, "active", np.ones(len(self.y), dtype=bool))

    @property
    def bandwidth(self) -> float:
        return self.config.bandwidth

    def train_indices(self, arm: int) -> np.ndarray:
        return np.flatnonzero(self.active & (self.a == arm))

    def predict(self, xq, arm: int) -> np.ndarray:
        """Vectorized :func:`nw_q` over the rows of ``xq``."""
        idx = self.train_indices(arm)
        if idx.size == 0:
            raise EmptyArmError(f"empty arm: no training point with treatment {arm}")
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        xt, yt = self.x[idx], self.y[idx]
        fallback = yt.mean()
        out = np.empty(xq.shape[0])
        for start in range(0, xq.shape[0], _CHUNK):
            w = gaussian_weights(xq[start:start + _CHUNK], xt, self.bandwidth)
            den = w.sum(axis=1)
            num = w @ yt
            ok = den >= self.config.denom_floor
            out[start:start + _CHUNK] = np.where(ok, num / np.where(ok, den, 1.0), fallback)
        return out

    def contrast(self, xq) -> np.ndarray:
        return self.predict(xq, 1) - self.predict(xq, 0)


def fit_surface(ds: Dataset, h: float, denom_floor: float = DENOM_FLOOR) -> QSurface:
    """Surface trained on every labeled observation."""
    return QSurface(ds.x, ds.a, ds.y, KernelConfig(h, denom_floor))


def nw_q(surface: QSurface, x, a: int) -> float:
    """Kernel-weighted mean of the arm-``a`` outcomes at the point ``x``."""
    return float(surface.predict(np.asarray(x, dtype=float).reshape(1, -1), a)[0])


def contrast_np(surface: QSurface, x) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(surface.contrast(x)[0])


# --------------------------------------------------------------------------
# folds and cross-fitting
# --------------------------------------------------------------------------


def fold_partition(n: int, k: int, seed: int) -> np.ndarray:
    """Fold label (0..k-1) per index; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("need at least two folds")
    if k > n:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for label, chunk in enumerate(np.array_split(perm, k)):
        folds[chunk] = label
    return folds


def fit_folded(ds: Dataset, h: float, K: int = 5, seed: int = 0, denom_floor: float = DENOM_FLOOR) -> list[QSurface]:
    """K surfaces, the k-th trained on all labeled data outside fold k."""
    folds = fold_partition(ds.n, K, seed)
    folds.setflags(write=False)
    config = KernelConfig(h, denom_floor)
    surfaces = []
    for k in range(K):
        active = folds != k
        for arm in (0, 1):
            if not np.any(active & (ds.a == arm)):
                raise EmptyArmError(
                    f"training data outside fold {k} has no subject with treatment {arm}; use fewer folds"
                )
        surfaces.append(QSurface(ds.x, ds.a, ds.y, config, active, folds, k))
    return surfaces


def _check_folded(folded: Sequence[QSurface]) -> None:
    if not folded:
        raise ValueError("no surfaces supplied")
    first = folded[0]
    if first.folds is None:
        raise ValueError("surfaces were not produced by fit_folded")
    if sorted(s.held_out for s in folded) != list(range(len(folded))):
        raise ValueError("folded surfaces must cover every fold exactly once")


def _fold_arm_sums(w: np.ndarray, folded: Sequence[QSurface], arm: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numerators and denominators per fold, and per-fold fallback means."""
    first = folded[0]
    masks = np.stack([(s.active & (s.a == arm)).astype(float) for s in folded], axis=1)
    num = w @ (masks * first.y[:, None])
    den = w @ masks
    fallback = (masks * first.y[:, None]).sum(axis=0) / masks.sum(axis=0)
    return num, den, fallback


def _ratio(num, den, fallback, floor):
    ok = den >= floor
    return np.where(ok, num / np.where(ok, den, 1.0), fallback)


def folded_mean(folded: Sequence[QSurface], xq, arm: int) -> np.ndarray:
    """Average of the K fold-excluded surfaces at each query row."""
    _check_folded(folded)
    first = folded[0]
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    out = np.empty(xq.shape[0])
    for start in range(0, xq.shape[0], _CHUNK):
        w = gaussian_weights(xq[start:start + _CHUNK], first.x, first.bandwidth)
        num, den, fallback = _fold_arm_sums(w, folded, arm)
        out[start:start + _CHUNK] = _ratio(num, den, fallback, first.config.denom_floor).mean(axis=1)
    return out


def held_out_predictions(folded: Sequence[QSurface], arm: Optional[int] = None) -> np.ndarray:
    """``Q_{-k(i)}(X_i, a)`` for every labeled i, using the surface that
    excludes i's own fold.  ``arm=None`` evaluates at the observed ``A_i``."""
    _check_folded(folded)
    first = folded[0]
    w = gaussian_weights(first.x, first.x, first.bandwidth)
    rows = np.arange(len(first.y))
    out = np.empty(len(first.y))
    for b in (0, 1) if arm is None else (arm,):
        num, den, fallback = _fold_arm_sums(w, folded, b)
        q = _ratio(num, den, fallback, first.config.denom_floor)[rows, first.folds]
        if arm is None:
            sel = first.a == b
            out[sel] = q[sel]
        else:
            out[:] = q
    return out


def loo_predictions(surface: QSurface) -> np.ndarray:
    """Leave-one-out ``Q(X_i, A_i)`` at each active training point (others NaN)."""
    w = gaussian_weights(surface.x, surface.x, surface.bandwidth)
    np.fill_diagonal(w, 0.0)
    out = np.full(len(surface.y), np.nan)
    for arm in (0, 1):
        idx = surface.train_indices(arm)
        if idx.size == 0:
            raise EmptyArmError(f"empty arm: no training point with treatment {arm}")
        sub = w[np.ix_(idx, idx)]
        den = sub.sum(axis=1)
        num = sub @ surface.y[idx]
        # each point's own fallback excludes itself
        if idx.size > 1:
            fallback = (surface.y[idx].sum() - surface.y[idx]) / (idx.size - 1)
        else:
            fallback = surface.y[idx]
        out[idx] = _ratio(num, den, fallback, surface.config.denom_floor)
    return out


# --------------------------------------------------------------------------
# bandwidth selection
# --------------------------------------------------------------------------


def pilot_bandwidth(n: int, p: int) -> float:
    return n ** (-1.0 / (p + 4))


def default_grid(n: int, p: int, size: int = 15) -> np.ndarray:
    h0 = pilot_bandwidth(n, p)
    return np.geomspace(h0 / 4, 4 * h0, size)


def cv_errors(ds: Dataset, grid, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Out-of-fold squared prediction error of ``Q(X_i, A_i)`` for each h."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("bandwidth grid is empty")
    if np.any(grid <= 0):
        raise ValueError("bandwidths must be positive")
    labels = fold_partition(ds.n, folds, seed)
    x, a, y = ds.x, ds.a, ds.y
    n = ds.n
    d2 = np.zeros((n, n))
    for k in range(ds.p):
        diff = x[:, k, None] - x[None, :, k]
        d2 += diff * diff
    usable = (labels[:, None] != labels[None, :]) & (a[:, None] == a[None, :])
    # fallback for (fold, arm) cells: arm mean outside the fold, or the
    # overall mean outside the fold if that arm is absent there
    fallback = np.empty(n)
    for k in range(folds):
        outside = labels != k
        for arm in (0, 1):
            cell = (labels == k) & (a == arm)
            pool = outside & (a == arm)
            fallback[cell] = y[pool].mean() if pool.any() else y[outside].mean()
    norm = (2 * math.pi) ** (-0.5 * ds.p)
    errors = np.empty(grid.size)
    for g, h in enumerate(grid):
        w = np.exp(-0.5 * d2 / (h * h)) * norm * usable
        den = w.sum(axis=1)
        num = w @ y
        pred = _ratio(num, den, fallback, DENOM_FLOOR)
        errors[g] = np.sum((y - pred) ** 2)
    return errors


def select_bandwidth(ds: Dataset, folds: int = 5, grid=None, seed: int = 0) -> float:
    """Grid value minimizing K-fold CV error; ties go to the larger bandwidth."""
    if folds < 2:
        raise ValueError("need at least two folds")
    grid = default_grid(ds.n, ds.p) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 1:
        return float(grid[0])
    errors = cv_errors(ds, grid, folds, seed)
    best = errors.min()
    # rounding noise decides nothing: compare against the outcome scale too
    slack = 1e-12 * (best + float(np.sum(ds.y**2)))
    tied = np.flatnonzero(errors <= best + slack)
    return float(grid[tied].max())


def bandwidth_rule_flags(n: int, p: int, h: float, order: int = 2) -> dict:
    """Finite-sample checks of the rate conditions behind the asymptotics.

    ``undersmoothing`` is raised when sqrt(n) h^r > 1 (smoothing bias not
    negligible); ``variance`` when sqrt(log n / (n h^p)) > 0.5.
    """
    bias_term = math.sqrt(n) * h ** order
    var_term = math.sqrt(math.log(n) / (n * h ** p))
    return {
        "sqrt_n_h_r": bias_term,
        "sqrt_logn_over_nhp": var_term,
        "undersmoothing": bias_term > 1.0,
        "variance": var_term > 0.5,
    }


def validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0 or np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise DataError("bandwidth grid must be a nonempty list of positive numbers")
    return grid
