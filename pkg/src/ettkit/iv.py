"""Instrumented estimation: per-stratum two-stage least squares on the team
shift propensity, with first-stage strength and instrument-independence
diagnostics.

Strata are game years.  Each usable stratum contributes its two-stage
estimate, and the overall figure is the treated-count weighted average over
usable strata.  Uncertainty comes from bootstrapping the entire stratified
pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.stats

from . import linmod, schema
from .errors import AllStrataUnusable, NoVariation, ResampleDegenerate, SingularDesign
from .weighting import BootstrapPlan, EttEstimate, bootstrap

__all__ = [
    "IvSpec",
    "StratumResult",
    "first_stage_f",
    "tsls_stratum",
    "ett_iv",
    "instrument_diagnostics",
]


@dataclass(frozen=True)
class IvSpec:
    """Instrument, conditioning set, and stratification for the IV route."""

    instrument: str = schema.INSTRUMENT
    covariates: tuple[str, ...] | None = None  # None: pitcher block present in data
    strata_key: str = schema.YEAR
    weak_f_floor: float = 10.0

    def resolve_covariates(self, frame: pd.DataFrame) -> list[str]:
        if self.covariates is not None:
            return list(self.covariates)
        return [c for c in schema.PITCHER_BLOCK if c in frame.columns]

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument,
            "covariates": None if self.covariates is None else list(self.covariates),
            "strata_key": self.strata_key,
            "weak_f_floor": self.weak_f_floor,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IvSpec":
        covs = doc.get("covariates")
        return cls(
            instrument=str(doc.get("instrument", schema.INSTRUMENT)),
            covariates=None if covs is None else tuple(covs),
            strata_key=str(doc.get("strata_key", schema.YEAR)),
            weak_f_floor=float(doc.get("weak_f_floor", 10.0)),
        )


@dataclass(frozen=True)
class StratumResult:
    key: object
    estimate: float
    partial_f: float
    f_instrument_only: float
    n_rows: int
    n_treated: int
    weak: bool
    used: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "stratum": self.key,
            "estimate": self.estimate,
            "partial_f": self.partial_f,
            "f_instrument_only": self.f_instrument_only,
            "n_rows": self.n_rows,
            "n_treated": self.n_treated,
            "weak": self.weak,
            "used": self.used,
            "reason": self.reason,
        }


def first_stage_f(
    treatment: np.ndarray,
    instrument: np.ndarray,
    covariates: np.ndarray | None = None,
) -> dict:
    """Instrument strength for a (sub)sample.

    Returns the F statistic of treatment on the instrument alone and, when a
    covariate matrix is supplied, the partial F of the instrument given the
    covariates.
    """
    t = np.asarray(treatment, dtype=float)
    z = np.asarray(instrument, dtype=float).reshape(-1, 1)
    n = len(t)
    ones = np.ones((n, 1))
    f_simple, _, df_simple = linmod.partial_f(np.hstack([ones, z]), ones, t)
    out = {"f_instrument_only": f_simple, "df_denominator": df_simple, "n_rows": n}
    if covariates is not None and covariates.size:
        Xr = np.hstack([ones, covariates])
        Xf = np.hstack([ones, z, covariates])
        f_partial, _, df_partial = linmod.partial_f(Xf, Xr, t)
        out["partial_f"] = f_partial
        out["df_denominator_partial"] = df_partial
    else:
        out["partial_f"] = f_simple
    return out


def _tsls_point(y, t, z, X) -> float:
    n = len(y)
    ones = np.ones((n, 1))
    stage1 = np.hstack([ones, z.reshape(-1, 1), X]) if X.size else np.hstack([ones, z.reshape(-1, 1)])
    gamma = linmod.fit_wls(stage1, t)
    t_hat = stage1 @ gamma
    stage2 = np.hstack([ones, t_hat.reshape(-1, 1), X]) if X.size else np.hstack([ones, t_hat.reshape(-1, 1)])
    beta = linmod.fit_wls(stage2, y)
    return float(beta[1])


def tsls_stratum(
    y: np.ndarray,
    t: np.ndarray,
    z: np.ndarray,
    X: np.ndarray,
    key,
    weak_f_floor: float = 10.0,
) -> StratumResult:
    """Two-stage estimate within one stratum.

    Raises NoVariation when the stratum has a constant treatment or a
    constant instrument; a weak first stage (partial F under the floor) is
    flagged but the estimate is still returned.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float)
    n = len(y)
    n_treated = int(t.sum())
    if n_treated == 0 or n_treated == n:
        raise NoVariation(f"stratum {key!r}: treatment does not vary")
    if np.all(z == z[0]):
        raise NoVariation(f"stratum {key!r}: instrument does not vary")
    p_full = 2 + (X.shape[1] if X.size else 0)
    if n < p_full + 2:
        raise NoVariation(f"stratum {key!r}: too few rows ({n}) for {p_full} columns")
    strength = first_stage_f(t, z, X if X.size else None)
    estimate = _tsls_point(y, t, z, X)
    partial = strength["partial_f"]
    return StratumResult(
        key=key,
        estimate=estimate,
        partial_f=partial,
        f_instrument_only=strength["f_instrument_only"],
        n_rows=n,
        n_treated=n_treated,
        weak=bool(partial < weak_f_floor),
        used=True,
    )


def _stratified_estimate(y, t, z, X, strata, weak_f_floor):
    """Weighted average of per-stratum estimates; returns (value, results)."""
    results: list[StratumResult] = []
    usable: list[StratumResult] = []
    for key in np.unique(strata):
        mask = strata == key
        try:
            res = tsls_stratum(
                y[mask], t[mask], z[mask],
                X[mask] if X.size else X,
                key=key.item() if hasattr(key, "item") else key,
                weak_f_floor=weak_f_floor,
            )
            usable.append(res)
        except (NoVariation, SingularDesign) as err:
            res = StratumResult(
                key=key.item() if hasattr(key, "item") else key,
                estimate=float("nan"),
                partial_f=float("nan"),
                f_instrument_only=float("nan"),
                n_rows=int(mask.sum()),
                n_treated=int(t[mask].sum()),
                weak=False,
                used=False,
                reason=f"{type(err).__name__}: {err}",
            )
        results.append(res)
    if not usable:
        raise AllStrataUnusable("every stratum lacked variation or rows")
    total_treated = sum(r.n_treated for r in usable)
    value = sum(r.estimate * r.n_treated for r in usable) / total_treated
    return float(value), results


def ett_iv(
    frame: pd.DataFrame,
    spec: IvSpec,
    plan: BootstrapPlan,
    *,
    subgroup: str = "all",
    threads: int = 1,
    keep_replicates: bool = False,
) -> tuple[EttEstimate, list[StratumResult]]:
    """Instrumented effect on the treated for one (sub)sample.

    Point estimate: treated-count weighted average of per-stratum two-stage
    estimates over usable strata (skipped strata get weight zero and are
    reported).  The interval bootstraps the whole stratified pipeline with
    row resampling.
    """
    covariates = spec.resolve_covariates(frame)
    y = frame[schema.OUTCOME].to_numpy(dtype=float)
    t = frame[schema.TREATMENT].to_numpy(dtype=float)
    z = frame[spec.instrument].to_numpy(dtype=float)
    X = frame[covariates].to_numpy(dtype=float) if covariates else np.empty((len(y), 0))
    strata = frame[spec.strata_key].to_numpy()

    point, results = _stratified_estimate(y, t, z, X, strata, spec.weak_f_floor)

    def estimator(idx: np.ndarray) -> float:
        try:
            value, _ = _stratified_estimate(
                y[idx], t[idx], z[idx],
                X[idx] if X.size else X,
                strata[idx], spec.weak_f_floor,
            )
            return value
        except (AllStrataUnusable, SingularDesign) as err:
            raise ResampleDegenerate(str(err)) from err

    boot = bootstrap(estimator, len(y), plan, threads=threads)
    total_treated_used = sum(r.n_treated for r in results if r.used)
    diagnostics = {
        "strata": [r.to_dict() for r in results],
        "stratum_weights": {
            str(r.key): (r.n_treated / total_treated_used if r.used else 0.0)
            for r in results
        },
        "weak_strata": [str(r.key) for r in results if r.used and r.weak],
        "skipped_strata": [str(r.key) for r in results if not r.used],
        "n_resamples": plan.n_resamples,
        "n_kept": boot.n_kept,
        "n_skipped": boot.n_skipped,
        "covariates": covariates,
    }
    if keep_replicates:
        diagnostics["replicates"] = [float(v) for v in boot.estimates]
    estimate = EttEstimate(
        method="iv",
        subgroup=subgroup,
        estimate=point,
        se=boot.se,
        ci_lower=boot.ci_lower,
        ci_upper=boot.ci_upper,
        n_treated=int(t.sum()),
        n_control=int((1.0 - t).sum()),
        diagnostics=diagnostics,
    )
    return estimate, results


def stratum_table_csv(results: Sequence[StratumResult]) -> str:
    """Per-stratum summary as CSV text (stratum, estimate, partial F, weight)."""
    total = sum(r.n_treated for r in results if r.used)
    lines = ["stratum,estimate,partial_f,weight,n_treated,weak,used"]
    for r in results:
        weight = r.n_treated / total if (r.used and total) else 0.0
        lines.append(
            f"{r.key},{r.estimate!r},{r.partial_f!r},{weight!r},"
            f"{r.n_treated},{r.weak},{r.used}"
        )
    return "\n".join(lines) + "\n"


def instrument_diagnostics(
    frame: pd.DataFrame,
    spec: IvSpec,
    covariates: Sequence[str] | None = None,
    *,
    n_groups: int = 3,
    alpha: float = 0.01,
) -> dict:
    """Covariate distributions across instrument tertiles (or n-tiles).

    A valid instrument should not sort units by their covariates, so each
    covariate is compared across instrument groups with a one-way ANOVA;
    covariates with p below `alpha` are flagged.
    """
    z = frame[spec.instrument].to_numpy(dtype=float)
    if np.all(z == z[0]):
        raise NoVariation("instrument does not vary; groups are undefined")
    if covariates is None:
        covariates = schema.covariate_columns(frame)
    edges = np.quantile(z, np.linspace(0, 1, n_groups + 1)[1:-1])
    groups = np.searchsorted(edges, z, side="right")
    labels = (
        ["low", "medium", "high"]
        if n_groups == 3
        else [f"g{i}" for i in range(n_groups)]
    )
    report: dict = {
        "instrument": spec.instrument,
        "alpha": alpha,
        "group_edges": [float(e) for e in edges],
        "group_counts": {labels[g]: int((groups == g).sum()) for g in range(n_groups)},
        "covariates": {},
        "flagged": [],
    }
    for cov in covariates:
        x = frame[cov].to_numpy(dtype=float)
        samples = [x[groups == g] for g in range(n_groups)]
        samples = [s for s in samples if s.size > 1]
        if len(samples) < 2:
            continue
        f_stat, p_value = scipy.stats.f_oneway(*samples)
        entry = {
            "groups": {
                labels[g]: {
                    "n": int((groups == g).sum()),
                    "mean": float(x[groups == g].mean()) if (groups == g).any() else float("nan"),
                    "sd": float(x[groups == g].std(ddof=1)) if (groups == g).sum() > 1 else float("nan"),
                }
                for g in range(n_groups)
            },
            "f": float(f_stat),
            "p": float(p_value),
            "flagged": bool(p_value < alpha),
        }
        report["covariates"][cov] = entry
        if entry["flagged"]:
            report["flagged"].append(cov)
    return report
