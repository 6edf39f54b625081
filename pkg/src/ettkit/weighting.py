"""Odds-of-treatment weighting and the shared bootstrap engine.

The plug-in estimator contrasts the treated-group outcome mean with a
counterfactual mean built by reweighting controls by the odds of their
estimated treatment probability.  Uncertainty comes from row resampling with
the propensity model refit inside every resample.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .errors import (
    ConvergenceFailure,
    DegenerateWeights,
    OneClass,
    ResampleDegenerate,
    Separation,
    SingularDesign,
)

__all__ = [
    "EttEstimate",
    "BootstrapPlan",
    "BootstrapResult",
    "bootstrap",
    "ett_iptw",
    "ett_iptw_estimate",
    "normalized_control_weights",
    "trim_sensitivity",
]


@dataclass(frozen=True)
class EttEstimate:
    """Point estimate of the average effect on the treated, with interval."""

    method: str
    subgroup: str
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    n_treated: int
    n_control: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.isfinite(self.se) and self.se < 0:
            raise ValueError(f"se must be >= 0, got {self.se}")
        if np.isfinite([self.ci_lower, self.estimate, self.ci_upper]).all():
            # slack absorbs ulp-level jitter when the bootstrap distribution
            # is (numerically) a point mass
            slack = 1e-12 * max(1.0, abs(self.estimate))
            if not (self.ci_lower - slack <= self.estimate <= self.ci_upper + slack):
                raise ValueError(
                    f"estimate {self.estimate} outside interval "
                    f"[{self.ci_lower}, {self.ci_upper}]"
                )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "subgroup": self.subgroup,
            "estimate": self.estimate,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class BootstrapPlan:
    """Row-resampling plan; `unit="game"` switches to cluster resampling."""

    n_resamples: int = 10000
    seed: int = 0
    unit: str = "row"

    def __post_init__(self):
        if self.n_resamples < 2:
            raise ValueError("need at least 2 resamples")
        if self.unit not in ("row", "game"):
            raise ValueError(f"unknown resampling unit {self.unit!r}")


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci_lower: float
    ci_upper: float
    n_kept: int
    n_skipped: int
    estimates: np.ndarray


def _replicate_indices(plan: BootstrapPlan, index: int, n_rows: int, cluster_rows) -> np.ndarray:
    gen = rngmod.replicate_stream(plan.seed, "bootstrap", index)
    if cluster_rows is None:
        return gen.integers(0, n_rows, n_rows)
    picks = gen.integers(0, len(cluster_rows), len(cluster_rows))
    return np.concatenate([cluster_rows[k] for k in picks])


def bootstrap(
    estimator: Callable[[np.ndarray], float],
    n_rows: int,
    plan: BootstrapPlan,
    *,
    threads: int = 1,
    clusters: np.ndarray | None = None,
) -> BootstrapResult:
    """Resample row indices, re-estimate, summarize.

    `estimator` receives an index array and returns a point estimate; it may
    raise ResampleDegenerate to have a replicate skipped and counted.  Each
    replicate draws from its own stream keyed by (seed, index), so results
    are identical for any thread count and any execution order.
    """
    if n_rows < 1:
        raise ValueError("cannot resample an empty dataset")
    cluster_rows = None
    if plan.unit == "game":
        if clusters is None:
            raise ValueError("cluster resampling requires cluster labels")
        labels = np.asarray(clusters)
        order = np.argsort(labels, kind="stable")
        uniq, starts = np.unique(labels[order], return_index=True)
        bounds = np.append(starts, len(labels))
        cluster_rows = [order[bounds[i]:bounds[i + 1]] for i in range(len(uniq))]

    def run_one(index: int) -> float:
        idx = _replicate_indices(plan, index, n_rows, cluster_rows)
        try:
            return float(estimator(idx))
        except ResampleDegenerate:
            return np.nan

    if threads <= 1:
        values = [run_one(i) for i in range(plan.n_resamples)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(run_one, range(plan.n_resamples)))
    estimates = np.asarray(values, dtype=float)
    kept = estimates[~np.isnan(estimates)]
    n_skipped = int(np.isnan(estimates).sum())
    if kept.size < 2:
        raise ResampleDegenerate(
            f"only {kept.size} of {plan.n_resamples} resamples usable"
        )
    lower, upper = np.percentile(kept, [2.5, 97.5])
    return BootstrapResult(
        se=float(np.std(kept, ddof=1)),
        ci_lower=float(lower),
        ci_upper=float(upper),
        n_kept=int(kept.size),
        n_skipped=n_skipped,
        estimates=kept,
    )


def ett_iptw(
    treatment: np.ndarray,
    outcome: np.ndarray,
    probs: np.ndarray,
    *,
    normalized: bool = False,
    eps: float = 1e-6,
) -> float:
    """Odds-weighting plug-in estimate of the effect on the treated.

    The default (unnormalized) form is

        mean(y | t=1) - (1 / share_treated) * mean((1-t) * p/(1-p) * y)

    where the second mean runs over all rows.  The normalized form instead
    divides by the realized control odds mass, which makes the counterfactual
    term an exact weighted mean of control outcomes.

    Raises DegenerateWeights if any control probability is >= 1 - eps.
    """
    t = np.asarray(treatment, dtype=bool)
    y = np.asarray(outcome, dtype=float)
    p = np.asarray(probs, dtype=float)
    n = t.shape[0]
    n_treated = int(t.sum())
    if n_treated == 0 or n_treated == n:
        raise ResampleDegenerate("a treatment arm is empty")
    if np.any(p[~t] >= 1.0 - eps):
        raise DegenerateWeights(
            f"control propensity at or above {1.0 - eps}; odds weight diverges"
        )
    treated_mean = float(y[t].mean())
    odds = np.where(~t, p / (1.0 - p), 0.0)
    if normalized:
        counter = float((odds * y)[~t].sum() / odds[~t].sum())
        return treated_mean - counter
    share = n_treated / n
    return treated_mean - float((odds * y).mean()) / share


def _ett_counts(
    t: np.ndarray,
    y: np.ndarray,
    p: np.ndarray,
    counts: np.ndarray,
    *,
    normalized: bool,
    eps: float,
) -> float:
    """ett_iptw over a resample given as per-row multiplicities.

    Agrees with ett_iptw on the gathered rows up to float reassociation;
    rows with count zero are outside the resample and are ignored, including
    by the degenerate-weight check.
    """
    c = counts
    n = c.sum()
    ct = c * t
    n_treated = ct.sum()
    if n_treated == 0.0 or n_treated == n:
        raise ResampleDegenerate("a treatment arm is empty")
    control = c > 0
    control &= ~(t > 0)
    if np.any(p[control] >= 1.0 - eps):
        raise DegenerateWeights(
            f"control propensity at or above {1.0 - eps}; odds weight diverges"
        )
    treated_mean = (ct @ y) / n_treated
    codds = np.where(control, p / (1.0 - p), 0.0) * c
    if normalized:
        return float(treated_mean - (codds @ y) / codds.sum())
    share = n_treated / n
    return float(treated_mean - (codds @ y) / n / share)


def normalized_control_weights(
    treatment: np.ndarray, probs: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Control odds weights rescaled to sum to the treated count (treated get 0)."""
    t = np.asarray(treatment, dtype=bool)
    p = np.asarray(probs, dtype=float)
    if np.any(p[~t] >= 1.0 - eps):
        raise DegenerateWeights("control propensity too close to 1")
    odds = np.where(~t, p / (1.0 - p), 0.0)
    return odds * (t.sum() / odds.sum())


def ett_iptw_estimate(
    X: np.ndarray,
    treatment: np.ndarray,
    outcome: np.ndarray,
    columns,
    plan: BootstrapPlan,
    *,
    subgroup: str = "all",
    normalized: bool = False,
    refit: bool = True,
    threads: int = 1,
    eps: float = 1e-6,
    clusters: np.ndarray | None = None,
    keep_replicates: bool = False,
) -> EttEstimate:
    """Odds-weighting estimate with a resampling interval.

    Fits the propensity model on the full design, computes the plug-in
    point estimate, then bootstraps.  By default the model is refit inside
    every resample so the interval carries the fitting uncertainty; with
    `refit=False` resampled rows keep their full-data scores (reported in
    the diagnostics either way).
    """
    from . import propensity as prop

    t = np.asarray(treatment, dtype=bool)
    y = np.asarray(outcome, dtype=float)
    model = prop.fit_logistic(X, t, columns)
    probs = model.prob_score(X, columns)
    point = ett_iptw(t, y, probs, normalized=normalized, eps=eps)

    # Refits reuse one standardized design: a resample's likelihood with row
    # multiplicities is the gathered-row likelihood, so a counts-weighted
    # Newton from the full-data solution is the same refit without the
    # per-replicate copy, rescale, and rank check.
    tf = t.astype(float)
    Xs, mu, sd = prop.standardized_design(np.asarray(X, dtype=float))
    beta0 = prop.standardized_beta(model, mu, sd)
    n_rows = len(y)

    skip_reasons: dict[str, int] = {}
    reason_lock = threading.Lock()

    def estimator(idx: np.ndarray) -> float:
        try:
            if refit:
                c = np.bincount(idx, minlength=n_rows).astype(float)
                beta = prop.newton_counts(Xs, tf, c, beta0)
                return _ett_counts(tf, y, expit(Xs @ beta), c,
                                   normalized=normalized, eps=eps)
            return ett_iptw(t[idx], y[idx], probs[idx],
                            normalized=normalized, eps=eps)
        except (DegenerateWeights, Separation, SingularDesign,
                ConvergenceFailure, OneClass) as err:
            with reason_lock:
                key = type(err).__name__
                skip_reasons[key] = skip_reasons.get(key, 0) + 1
            raise ResampleDegenerate(str(err)) from err

    boot = bootstrap(estimator, len(y), plan, threads=threads, clusters=clusters)
    diagnostics = {
        "normalized": normalized,
        "refit_per_resample": refit,
        "n_resamples": plan.n_resamples,
        "n_kept": boot.n_kept,
        "n_skipped": boot.n_skipped,
        "skip_reasons": dict(sorted(skip_reasons.items())),
        "propensity_iterations": model.convergence.iterations,
        "resample_unit": plan.unit,
    }
    if keep_replicates:
        diagnostics["replicates"] = [float(v) for v in boot.estimates]
    return EttEstimate(
        method="iptw",
        subgroup=subgroup,
        estimate=point,
        se=boot.se,
        ci_lower=boot.ci_lower,
        ci_upper=boot.ci_upper,
        n_treated=int(t.sum()),
        n_control=int((~t).sum()),
        diagnostics=diagnostics,
    )


def trim_sensitivity(
    X: np.ndarray,
    treatment: np.ndarray,
    outcome: np.ndarray,
    columns,
    plan: BootstrapPlan,
    *,
    percentile: float = 95.0,
    subgroup: str = "all",
    normalized: bool = False,
    refit: bool = True,
    threads: int = 1,
    eps: float = 1e-6,
) -> dict:
    """Side-by-side estimates on all rows and with high-propensity rows dropped.

    The threshold is the given percentile of the full-sample fitted
    probabilities; rows above it (either arm) are removed and the whole
    estimate, bootstrap included, is recomputed on the remainder.
    """
    from . import propensity as prop

    t = np.asarray(treatment, dtype=bool)
    y = np.asarray(outcome, dtype=float)
    model = prop.fit_logistic(X, t, columns)
    probs = model.prob_score(X, columns)
    threshold = float(np.percentile(probs, percentile))
    keep = probs <= threshold
    common = dict(subgroup=subgroup, normalized=normalized, refit=refit,
                  threads=threads, eps=eps)
    untrimmed = ett_iptw_estimate(X, t, y, columns, plan, **common)
    trimmed = ett_iptw_estimate(X[keep], t[keep], y[keep], columns, plan, **common)
    return {
        "percentile": percentile,
        "threshold": threshold,
        "n_dropped": int((~keep).sum()),
        "untrimmed": untrimmed,
        "trimmed": trimmed,
    }
