"""Treatment-probability model: IRLS logistic regression and positivity checks.

Fitting standardizes columns internally for conditioning and reports
coefficients on the original scale.  No regularization is applied unless a
ridge penalty is explicitly requested.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from . import linmod
from .errors import (
    ConvergenceFailure,
    ManifestMismatch,
    OneClass,
    Separation,
    SingularDesign,
)

__all__ = ["PropensityModel", "ConvergenceReport", "fit_logistic", "positivity_report"]

# Standardized-scale coefficients past this norm mean the likelihood is
# drifting to a separated optimum at infinity.
_SEPARATION_NORM = 30.0
_MAX_HALVINGS = 40


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm_scaled: float
    step_halvings: int
    ridge: float


@dataclass(frozen=True)
class PropensityModel:
    """Fitted treatment-probability model on the original column scales."""

    intercept: float
    coefficients: Mapping[str, float]
    manifest: tuple[str, ...]
    convergence: ConvergenceReport
    n_rows: int
    n_treated: int

    def _matrix(self, data, columns) -> np.ndarray:
        if isinstance(data, pd.DataFrame):
            missing = [c for c in self.manifest if c not in data.columns]
            if missing:
                raise ManifestMismatch(f"scoring input lacks manifest columns: {missing}")
            return data[list(self.manifest)].to_numpy(dtype=float)
        X = np.asarray(data, dtype=float)
        if columns is None:
            raise ManifestMismatch("array scoring input requires the column list")
        if tuple(columns) != self.manifest:
            raise ManifestMismatch(f"columns {tuple(columns)} != manifest {self.manifest}")
        return X

    def linear_score(self, data, columns: Sequence[str] | None = None) -> np.ndarray:
        """Log-odds of treatment for each row."""
        X = self._matrix(data, columns)
        beta = np.array([self.coefficients[c] for c in self.manifest])
        return self.intercept + X @ beta

    def prob_score(self, data, columns: Sequence[str] | None = None) -> np.ndarray:
        """Treatment probability for each row."""
        return expit(self.linear_score(data, columns))

    def to_json(self) -> str:
        doc = {
            "intercept": self.intercept,
            "coefficients": {c: self.coefficients[c] for c in self.manifest},
            "manifest": list(self.manifest),
            "convergence": asdict(self.convergence),
            "n_rows": self.n_rows,
            "n_treated": self.n_treated,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        doc = json.loads(text)
        return cls(
            intercept=float(doc["intercept"]),
            coefficients={k: float(v) for k, v in doc["coefficients"].items()},
            manifest=tuple(doc["manifest"]),
            convergence=ConvergenceReport(**doc["convergence"]),
            n_rows=int(doc["n_rows"]),
            n_treated=int(doc["n_treated"]),
        )


def _loglik(t, eta):
    # log L = sum t*eta - log(1 + exp(eta)), stable via logaddexp
    return float(t @ eta - np.logaddexp(0.0, eta).sum())


def fit_logistic(
    X: np.ndarray | pd.DataFrame,
    treatment: np.ndarray,
    columns: Sequence[str] | None = None,
    *,
    ridge: float = 0.0,
    grad_tol: float = 1e-12,
    max_iter: int = 100,
    init: PropensityModel | None = None,
) -> PropensityModel:
    """Fit P(T=1 | x) by iteratively reweighted least squares.

    Parameters
    ----------
    X : array (n, p) or DataFrame
        Covariates without an intercept column; the intercept is internal.
    treatment : array of {0, 1}
    columns : names for array input (taken from the frame otherwise).
    ridge : penalty on standardized non-intercept coefficients; 0 = none.
    grad_tol : stop when the score norm falls below grad_tol * n.
    init : optional previous model for warm starting (bootstrap refits).

    Raises
    ------
    OneClass, SingularDesign, Separation, ConvergenceFailure
    """
    if isinstance(X, pd.DataFrame):
        columns = list(X.columns)
        X = X.to_numpy(dtype=float)
    else:
        X = np.asarray(X, dtype=float)
        if columns is None:
            columns = [f"x{i}" for i in range(X.shape[1])]
        columns = list(columns)
    t = np.asarray(treatment, dtype=float)
    n, p = X.shape
    if n != t.shape[0]:
        raise ValueError("X and treatment lengths differ")
    if n < p + 2:
        raise ValueError(f"need at least {p + 2} rows for {p} columns, got {n}")
    if np.isnan(X).any() or np.isnan(t).any():
        raise ValueError("missing values in design or treatment")
    n_treated = int(t.sum())
    if n_treated == 0 or n_treated == n:
        raise OneClass("treatment has a single class; probabilities are degenerate")

    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=0)
    flat = [columns[j] for j in range(p) if sd[j] == 0.0]
    if flat:
        raise SingularDesign(flat, f"constant columns duplicate the intercept: {flat}")
    Z = (X - mu) / sd
    Xs = np.hstack([np.ones((n, 1)), Z])
    dependent = linmod.dependent_columns(Xs, ["intercept"] + columns)
    if dependent:
        raise SingularDesign(dependent)

    penalty = np.zeros(p + 1)
    penalty[1:] = ridge

    beta = np.zeros(p + 1)
    if init is not None:
        raw = np.array([init.coefficients.get(c, 0.0) for c in columns])
        beta[1:] = raw * sd
        beta[0] = init.intercept + raw @ mu
    eta = Xs @ beta
    ll = _loglik(t, eta) - 0.5 * float(penalty @ beta**2)
    halvings_total = 0
    grad_scaled = np.inf
    for iteration in range(1, max_iter + 1):
        prob = expit(eta)
        grad = Xs.T @ (t - prob) - penalty * beta
        grad_scaled = float(np.linalg.norm(grad)) / n
        if grad_scaled < grad_tol:
            break
        w = prob * (1.0 - prob)
        H = (Xs * w[:, None]).T @ Xs + np.diag(penalty)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise Separation("weight matrix collapsed; classes appear separated")
        step_eta = Xs @ step
        scale = 1.0
        halvings = 0
        while True:
            candidate = beta + scale * step
            eta_new = eta + scale * step_eta
            ll_new = _loglik(t, eta_new) - 0.5 * float(penalty @ candidate**2)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
            halvings += 1
            if halvings > _MAX_HALVINGS:
                break
        halvings_total += halvings
        if halvings > _MAX_HALVINGS:
            break
        beta, eta, ll = candidate, eta_new, ll_new
        if ridge == 0.0 and float(np.max(np.abs(beta))) > _SEPARATION_NORM:
            raise Separation(
                "standardized coefficients exceeded "
                f"{_SEPARATION_NORM}; classes appear separated"
            )
    else:
        iteration = max_iter
    prob = expit(eta)
    grad = Xs.T @ (t - prob) - penalty * beta
    grad_scaled = float(np.linalg.norm(grad)) / n
    if grad_scaled >= 1e-8:
        if float(np.max(np.abs(beta))) > _SEPARATION_NORM * 0.8:
            raise Separation("no convergence and large coefficients; likely separation")
        raise ConvergenceFailure(f"score norm {grad_scaled:.2e} after {iteration} iterations")

    raw = beta[1:] / sd
    intercept = float(beta[0] - raw @ mu)
    report = ConvergenceReport(
        iterations=iteration,
        grad_norm_scaled=grad_scaled,
        step_halvings=halvings_total,
        ridge=ridge,
    )
    return PropensityModel(
        intercept=intercept,
        coefficients=dict(zip(columns, raw.tolist())),
        manifest=tuple(columns),
        convergence=report,
        n_rows=n,
        n_treated=n_treated,
    )


def standardized_design(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intercept-plus-standardized design and the (mu, sd) used to build it."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=0)
    Xs = np.hstack([np.ones((X.shape[0], 1)), (X - mu) / sd])
    return Xs, mu, sd


def standardized_beta(model: PropensityModel, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """Model coefficients rebased onto the standardized design."""
    raw = np.array([model.coefficients[c] for c in model.manifest])
    beta = np.empty(raw.size + 1)
    beta[1:] = raw * sd
    beta[0] = model.intercept + raw @ mu
    return beta


def newton_counts(
    Xs: np.ndarray,
    treatment: np.ndarray,
    counts: np.ndarray,
    beta0: np.ndarray,
    *,
    grad_tol: float = 1e-9,
    max_iter: int = 12,
) -> np.ndarray:
    """Weighted logistic refit for a bootstrap resample given as row counts.

    Maximizes the same likelihood as fitting on the gathered resample rows
    (a count-c row contributes c copies), starting from the full-data
    solution, so a couple of Newton steps normally suffice.  `Xs` already
    carries the intercept column and standardization.
    """
    t = np.asarray(treatment, dtype=float)
    c = np.asarray(counts, dtype=float)
    n = float(c.sum())
    treated = float(c @ t)
    if treated == 0.0 or treated == n:
        raise OneClass("resample holds a single treatment class")
    beta = beta0.copy()
    eta = Xs @ beta
    grad_scaled = np.inf
    for _ in range(max_iter):
        prob = expit(eta)
        grad = Xs.T @ (c * (t - prob))
        grad_scaled = float(np.linalg.norm(grad)) / n
        if grad_scaled < grad_tol:
            return beta
        w = c * prob * (1.0 - prob)
        H = (Xs * w[:, None]).T @ Xs
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SingularDesign([], "resample design is singular")
        # Grad-norm safeguard instead of a likelihood line search: halve
        # until the scaled score shrinks (full steps pass near the start).
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            candidate = beta + scale * step
            eta_new = Xs @ candidate
            new_scaled = float(np.linalg.norm(Xs.T @ (c * (t - expit(eta_new))))) / n
            if new_scaled < grad_scaled:
                break
            scale *= 0.5
        else:
            raise ConvergenceFailure("score norm would not shrink on a resample")
        beta, eta = candidate, eta_new
        if float(np.max(np.abs(beta))) > _SEPARATION_NORM:
            raise Separation("resample coefficients diverged; likely separation")
    prob = expit(eta)
    grad_scaled = float(np.linalg.norm(Xs.T @ (c * (t - prob)))) / n
    if grad_scaled >= 1e-8:
        raise ConvergenceFailure(f"resample score norm {grad_scaled:.2e}")
    return beta


_QUANTILES = (0.0, 0.025, 0.25, 0.5, 0.75, 0.975, 1.0)


def _quantile_row(probs: np.ndarray) -> dict:
    qs = np.quantile(probs, _QUANTILES)
    return {f"q{q}": float(v) for q, v in zip(_QUANTILES, qs)}


def positivity_report(
    probs: np.ndarray,
    treatment: np.ndarray,
    years: np.ndarray,
) -> dict:
    """Propensity distribution summary per year and treatment arm.

    For each year: quantiles per arm, the common-support interval (overlap
    of the arms' ranges), and per-arm counts falling outside it.
    """
    probs = np.asarray(probs, dtype=float)
    t = np.asarray(treatment).astype(bool)
    years = np.asarray(years)
    report: dict = {"years": {}, "overall": {}}
    for mask, section in [(np.ones(len(probs), bool), report["overall"])] + [
        (years == year, report["years"].setdefault(str(year), {}))
        for year in np.unique(years)
    ]:
        pt, pc = probs[mask & t], probs[mask & ~t]
        if pt.size == 0 or pc.size == 0:
            section["empty_arm"] = True
            continue
        lo = max(pt.min(), pc.min())
        hi = min(pt.max(), pc.max())
        section["treated"] = {"n": int(pt.size), **_quantile_row(pt)}
        section["control"] = {"n": int(pc.size), **_quantile_row(pc)}
        section["common_support"] = [float(lo), float(hi)]
        section["outside_support"] = {
            "treated": int(((pt < lo) | (pt > hi)).sum()),
            "control": int(((pc < lo) | (pc > hi)).sum()),
        }
    return report
