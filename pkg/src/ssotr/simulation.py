"""Monte Carlo study: three contrast models crossed with two baselines.

Data: ``X ~ N(0, I_p)`` truncated to ``[-5, 5]^p`` by resampling,
``A ~ Bernoulli(expit(0.5 X1 - 0.5 X2))`` and
``Y = mu(X) + A C(X) + eps`` with standard normal noise.  The first ``n``
rows keep ``(A, Y)``; the next ``N`` rows are stripped to covariates.

Each replication draws its own random stream from ``(seed, rep_index)`` so
replications can run in any order (or in parallel) and still give a
bit-identical report.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data_model import Dataset, augment, standardize
from .errors import SSOTRError
from .estimators import RegimeFit, fit_np, fit_ss, fit_tr, normal_quantile
from .kernel_regression import fit_folded, fit_surface, select_bandwidth
from .linalg import least_squares
from .propensity import DEFAULT_CLIP, fit_propensity

log = logging.getLogger(__name__)

MODELS = ("linear", "cubic", "sine")
BASELINES = ("b1", "b2")
BOUND = 5.0
MAX_FAILURE_RATE = 0.05
_TRUTH_KEY = 0x7472757468  # spawn key reserved for the Monte Carlo truth sample

ETA = {"linear": (1.0, 1.0), "cubic": (0.3, 0.6), "sine": (1.0, 1.0)}
OMEGA = (0.5, 0.5)
ALPHA = (0.75, 0.75)
PROPENSITY_COEF = (0.5, -0.5)


def _pad(coef, p: int) -> np.ndarray:
    out = np.zeros(p)
    m = min(p, len(coef))
    out[:m] = coef[:m]
    return out


def contrast_fn(model: str, x: np.ndarray) -> np.ndarray:
    index = x @ _pad(ETA[model], x.shape[1])
    if model == "linear":
        return index
    if model == "cubic":
        return index ** 3
    return np.sin(index)


def baseline_fn(baseline: str, x: np.ndarray) -> np.ndarray:
    w = x @ _pad(OMEGA, x.shape[1])
    if baseline == "b1":
        return w ** 3
    return (x @ _pad(ALPHA, x.shape[1])) * (1 + w)


def true_propensity(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(x @ _pad(PROPENSITY_COEF, x.shape[1]))))


@dataclass(frozen=True)
class SimConfig:
    model: str = "linear"
    baseline: str = "b1"
    n: int = 500
    N: int = 5000
    p: int = 2
    replications: int = 100
    mc_truth_size: int = 500_000
    seed: int = 0
    K: int = 5
    grid: Optional[tuple[float, ...]] = None
    clip_eps: float = DEFAULT_CLIP
    include_np: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; valid models: {', '.join(MODELS)}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; valid baselines: {', '.join(BASELINES)}")
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.mc_truth_size < 10 * self.n:
            raise ValueError("mc_truth_size must be at least 10 n")
        if self.p < 2:
            raise ValueError("the data-generating models need p >= 2")

    @property
    def methods(self) -> tuple[str, ...]:
        return ("tr", "np", "ss") if self.include_np else ("tr", "ss")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def draw_covariates(rng: np.random.Generator, size: int, p: int) -> np.ndarray:
    """Standard normal draws, resampling any coordinate outside [-5, 5]."""
    x = rng.standard_normal((size, p))
    bad = np.abs(x) > BOUND
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > BOUND
    return x


def simulate_full(cfg: SimConfig, rep_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fully observed ``(X, A, Y)`` for all n + N subjects of a replication."""
    rng = _rng(cfg.seed, rep_index)
    total = cfg.n + cfg.N
    x = draw_covariates(rng, total, cfg.p)
    a = (rng.random(total) < true_propensity(x)).astype(np.int8)
    eps = rng.standard_normal(total)
    y = baseline_fn(cfg.baseline, x) + a * contrast_fn(cfg.model, x) + eps
    return x, a, y


def generate_replication(cfg: SimConfig, rep_index: int) -> Dataset:
    """Raw-scale dataset: first n rows labeled, remaining N covariate-only."""
    x, a, y = simulate_full(cfg, rep_index)
    n = cfg.n
    return Dataset(x=x[:n], a=a[:n], y=y[:n], x_unlabeled=x[n:])


@dataclass(frozen=True)
class TruthSet:
    beta_star: np.ndarray
    v0: float
    x: np.ndarray
    contrast: np.ndarray
    baseline: np.ndarray

    def beta_star_se(self) -> np.ndarray:
        """Monte Carlo standard error of each entry of ``beta_star``."""
        design = augment(self.x)
        resid = self.contrast - design @ self.beta_star
        m = design.shape[0]
        lam_inv = np.linalg.inv(design.T @ design / m)
        psi = (design * resid[:, None]) @ lam_inv
        return np.sqrt(np.diag(psi.T @ psi / m) / m)


def compute_truth(cfg: SimConfig, seed: Optional[int] = None) -> TruthSet:
    """``beta*`` (least squares of C(X) on (1, X)) and the optimal value ``V0``
    over one large Monte Carlo covariate sample."""
    rng = _rng(cfg.seed if seed is None else seed, _TRUTH_KEY)
    x = draw_covariates(rng, cfg.mc_truth_size, cfg.p)
    c = contrast_fn(cfg.model, x)
    mu = baseline_fn(cfg.baseline, x)
    beta_star = least_squares(augment(x), c)
    v0 = float(np.mean(mu + np.where(c > 0, c, 0.0)))
    for arr in (x, c, mu):
        arr.setflags(write=False)
    return TruthSet(beta_star, v0, x, c, mu)


def pcd(beta_hat, beta_star, eval_x) -> float:
    """Share of ``eval_x`` rows on which the two linear rules agree."""
    design = augment(np.asarray(eval_x, dtype=float))
    d_hat = design @ np.asarray(beta_hat) > 0
    d_star = design @ np.asarray(beta_star) > 0
    return float(1.0 - np.mean(d_hat != d_star))


def value_of_rule(beta_hat, truth: TruthSet) -> float:
    """Mean of ``mu(X) + d(X) C(X)`` over the Monte Carlo sample."""
    d = augment(truth.x) @ np.asarray(beta_hat) > 0
    return float(np.mean(truth.baseline + np.where(d, truth.contrast, 0.0)))


# --------------------------------------------------------------------------
# replications
# --------------------------------------------------------------------------


def fit_replication(cfg: SimConfig, ds_raw: Dataset, rep_index: int) -> dict[str, RegimeFit]:
    """Estimate every configured method on one replication's data."""
    ds = standardize(ds_raw)
    prop = fit_propensity(ds, clip_eps=cfg.clip_eps)
    split_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(rep_index, 1)).generate_state(1)[0])
    fits = {"tr": fit_tr(ds, prop)}
    h = select_bandwidth(ds, folds=cfg.K, grid=cfg.grid, seed=split_seed)
    folded = fit_folded(ds, h, cfg.K, split_seed)
    if cfg.include_np:
        fits["np"] = fit_np(ds, fit_surface(ds, h), prop, folded)
    fits["ss"] = fit_ss(ds, folded, prop)
    return fits


def run_replication(cfg: SimConfig, truth: TruthSet, rep_index: int) -> dict:
    ds_raw = generate_replication(cfg, rep_index)
    try:
        fits = fit_replication(cfg, ds_raw, rep_index)
    except SSOTRError as exc:
        return {"rep": rep_index, "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    z = normal_quantile(0.975)
    eval_x = ds_raw.x_pooled
    row = {"rep": rep_index, "failed": False, "bandwidth": fits["ss"].bandwidth}
    for method, fit in fits.items():
        beta, cov = fit.raw_scale()
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        cover = np.abs(beta - truth.beta_star) <= z * se
        row[method] = {
            "beta": beta.tolist(),
            "se": se.tolist(),
            "cover": cover.astype(int).tolist(),
            "pcd": pcd(beta, truth.beta_star, eval_x),
            "value": value_of_rule(beta, truth),
        }
    return row


_WORKER: dict = {}


def _init_worker(cfg: SimConfig, truth: TruthSet) -> None:
    _WORKER["cfg"] = cfg
    _WORKER["truth"] = truth


def _worker(rep_index: int) -> dict:
    return run_replication(_WORKER["cfg"], _WORKER["truth"], rep_index)


class StudyAborted(SSOTRError):
    """Too many replications failed; ``report`` holds what was collected."""

    def __init__(self, message: str, report: "SimReport"):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def _sd(values: np.ndarray) -> Optional[np.ndarray]:
    if values.shape[0] < 2:
        return None
    return values.std(axis=0, ddof=1)


def _maybe_list(arr):
    if arr is None:
        return None
    if np.ndim(arr) == 0:
        return float(arr)
    return np.asarray(arr, dtype=float).tolist()


@dataclass
class SimReport:
    config: dict
    beta_star: list
    v0: float
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    relative_efficiency: Optional[list] = None
    failures: int = 0
    elapsed_seconds: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        # wall-clock time would break byte-identical reports
        out.pop("elapsed_seconds")
        out["schema_version"] = 1
        return out

    def format_table(self) -> str:
        """Text rendering in the layout of the usual decision and
        parameter-estimation tables."""
        cfg = self.config
        methods = list(self.summary)
        reps = len(self.rows) - self.failures
        lines = [
            f"model={cfg['model']}  baseline={cfg['baseline']}  n={cfg['n']}  N={cfg['N']}  "
            f"replications={reps} (failed {self.failures})  seed={cfg['seed']}",
            "",
            f"V0 = {self.v0:.4f}",
            f"{'method':<8}{'V':>18}{'PCD':>18}",
        ]

        def pm(mean, sd):
            return f"{mean:.3f} ({sd:.3f})" if sd is not None else f"{mean:.3f} (  -  )"

        for m in methods:
            s = self.summary[m]
            lines.append(f"{m.upper():<8}{pm(s['value_mean'], s['value_sd']):>18}{pm(s['pcd_mean'], s['pcd_sd']):>18}")
        lines.append("")
        header = f"{'beta*':>8}"
        for m in methods:
            header += f" | {m.upper() + ' bias':>9}{'SD':>7}{'SE':>7}{'CP':>6}"
        header += f" | {'RE':>6}"
        lines.append(header)
        for j, b in enumerate(self.beta_star):
            line = f"{b:>8.3f}"
            for m in methods:
                s = self.summary[m]
                sd = s["sd"][j] if s["sd"] is not None else float("nan")
                line += f" | {s['bias'][j]:>9.3f}{sd:>7.3f}{s['se_mean'][j]:>7.3f}{s['cp'][j]:>6.2f}"
            re = self.relative_efficiency[j] if self.relative_efficiency else float("nan")
            line += f" | {re:>6.2f}"
            lines.append(line)
        return "\n".join(lines)


def aggregate(cfg: SimConfig, truth: TruthSet, rows: Sequence[dict], elapsed: float = 0.0) -> SimReport:
    rows = sorted(rows, key=lambda r: r["rep"])
    ok = [r for r in rows if not r["failed"]]
    summary = {}
    if ok:
        for m in cfg.methods:
            beta = np.array([r[m]["beta"] for r in ok])
            se = np.array([r[m]["se"] for r in ok])
            cover = np.array([r[m]["cover"] for r in ok], dtype=float)
            pcds = np.array([r[m]["pcd"] for r in ok])
            vals = np.array([r[m]["value"] for r in ok])
            pcd_sd, val_sd = _sd(pcds), _sd(vals)
            summary[m] = {
                "value_mean": float(vals.mean()),
                "value_sd": _maybe_list(val_sd),
                "pcd_mean": float(pcds.mean()),
                "pcd_sd": _maybe_list(pcd_sd),
                "pcd_mc_se": None if pcd_sd is None else float(pcd_sd / math.sqrt(len(ok))),
                "bias": (beta.mean(axis=0) - truth.beta_star).tolist(),
                "sd": _maybe_list(_sd(beta)),
                "se_mean": se.mean(axis=0).tolist(),
                "se_median": np.median(se, axis=0).tolist(),
                "cp": cover.mean(axis=0).tolist(),
            }
    re = None
    if ok and "tr" in cfg.methods and "ss" in cfg.methods:
        err_tr = np.sum((np.array([r["tr"]["beta"] for r in ok]) - truth.beta_star) ** 2, axis=0)
        err_ss = np.sum((np.array([r["ss"]["beta"] for r in ok]) - truth.beta_star) ** 2, axis=0)
        re = np.where(err_ss > 0, err_tr / np.where(err_ss > 0, err_ss, 1.0), np.inf).tolist()
    config = asdict(cfg)
    config["grid"] = None if cfg.grid is None else list(cfg.grid)
    # execution setting only; reports must not depend on it
    config.pop("threads")
    return SimReport(
        config=config,
        beta_star=truth.beta_star.tolist(),
        v0=truth.v0,
        rows=list(rows),
        summary=summary,
        relative_efficiency=re,
        failures=len(rows) - len(ok),
        elapsed_seconds=elapsed,
    )


def run_study(cfg: SimConfig, truth: Optional[TruthSet] = None, progress=None) -> SimReport:
    """Run every replication, then aggregate in replication order.

    Raises :class:`StudyAborted` when more than 5% of replications fail.
    """
    start = time.perf_counter()
    if truth is None:
        truth = compute_truth(cfg)
    reps = range(cfg.replications)
    rows = []
    if cfg.threads > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(cfg.threads, initializer=_init_worker, initargs=(cfg, truth)) as pool:
            for row in pool.map(_worker, reps, chunksize=max(1, cfg.replications // (4 * cfg.threads))):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for r in reps:
            row = run_replication(cfg, truth, r)
            rows.append(row)
            if progress:
                progress(row)
    report = aggregate(cfg, truth, rows, time.perf_counter() - start)
    for row in rows:
        if row["failed"]:
            log.warning("replication %d failed: %s", row["rep"], row["error"])
    if report.failures > MAX_FAILURE_RATE * cfg.replications:
        raise StudyAborted(
            f"{report.failures} of {cfg.replications} replications failed "
            f"(limit {MAX_FAILURE_RATE:.0%}); first error: "
            + next(r["error"] for r in rows if r["failed"]),
            report,
        )
    return report
