"""Weighted least squares with sandwich covariance, plus design-matrix helpers.

Point estimation treats weights as frequencies: a row with weight w counts
as w copies of itself in the information and the degrees-of-freedom
correction.  The sandwich covariance supports both readings of the weights:
frequency (w copies of one observation, meat term w e^2) and importance (one
observation whose estimating-equation score is scaled by w, meat term
(w e)^2).  Matched-set regressions use the importance reading because their
fractional re-use weights scale scores rather than replicate rows.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import SingularDesign

__all__ = [
    "design_matrix",
    "dependent_columns",
    "fit_wls",
    "hc1_cov",
    "partial_f",
]


def design_matrix(
    frame: pd.DataFrame,
    continuous: list[str],
    categorical: list[str] = (),
    intercept: bool = True,
) -> tuple[np.ndarray, list[str]]:
    """Assemble a float design matrix from named columns.

    Categorical columns expand to indicator columns for every level except
    the first (levels sorted, so the expansion is deterministic).  A
    categorical column with a single observed level contributes nothing.
    """
    pieces = []
    names: list[str] = []
    n = len(frame)
    if intercept:
        pieces.append(np.ones((n, 1)))
        names.append("intercept")
    if continuous:
        block = frame[list(continuous)].to_numpy(dtype=float)
        pieces.append(block)
        names.extend(continuous)
    for col in categorical:
        values = frame[col].to_numpy()
        levels = np.unique(values)
        for level in levels[1:]:
            pieces.append((values == level).astype(float).reshape(-1, 1))
            names.append(f"{col}={level}")
    X = np.ascontiguousarray(np.hstack(pieces))
    return X, names


def dependent_columns(X: np.ndarray, names: list[str], weights=None) -> list[str]:
    """Names of columns beyond the numerical rank, found by pivoted QR."""
    A = X if weights is None else X * np.sqrt(weights)[:, None]
    r = scipy.linalg.qr(A, mode="r", pivoting=True)
    diag = np.abs(np.diag(r[0]))
    pivots = r[1]
    if diag.size == 0 or diag[0] == 0:
        return [names[i] for i in pivots]
    tol = diag[0] * max(A.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    return [names[i] for i in sorted(pivots[rank:])]


def fit_wls(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    names: list[str] | None = None,
) -> np.ndarray:
    """Frequency-weighted least squares coefficients.

    Raises SingularDesign naming the dependent columns when X (under the
    weighting) is rank deficient.
    """
    if weights is None:
        A, b = X, y
    else:
        root = np.sqrt(weights)
        A, b = X * root[:, None], y * root
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < X.shape[1]:
        cols = names if names is not None else [f"x{i}" for i in range(X.shape[1])]
        raise SingularDesign(dependent_columns(X, cols, weights))
    return coef


def hc1_cov(
    X: np.ndarray,
    y: np.ndarray,
    coef: np.ndarray,
    weights: np.ndarray | None = None,
    weight_kind: str = "frequency",
) -> np.ndarray:
    """HC1 sandwich covariance of WLS coefficients.

    `weight_kind` picks the meat scaling: "frequency" uses w e^2 (a weight-w
    row is w independent copies), "importance" uses (w e)^2 (one row whose
    score is scaled by w).
    """
    if weight_kind not in ("frequency", "importance"):
        raise ValueError(f"unknown weight_kind {weight_kind!r}")
    n, p = X.shape
    w = np.ones(n) if weights is None else weights
    resid = y - X @ coef
    bread = np.linalg.inv((X * w[:, None]).T @ X)
    scale = w if weight_kind == "frequency" else w * w
    meat = (X * (scale * resid ** 2)[:, None]).T @ X
    n_eff = float(np.sum(w))
    dof = n_eff / (n_eff - p)
    return dof * bread @ meat @ bread


def _rss(X, y, weights):
    coef = fit_wls(X, y, weights)
    resid = y - X @ coef
    if weights is None:
        return float(resid @ resid)
    return float(resid @ (weights * resid))


def partial_f(
    X_full: np.ndarray,
    X_reduced: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, int, float]:
    """F statistic for the columns X_full adds over X_reduced.

    Returns (F, numerator df, denominator df).  The denominator df uses the
    weight total when weights are given, matching the frequency reading.
    """
    q = X_full.shape[1] - X_reduced.shape[1]
    if q <= 0:
        raise ValueError("X_full must strictly extend X_reduced")
    rss_full = _rss(X_full, y, weights)
    rss_reduced = _rss(X_reduced, y, weights)
    n_eff = X_full.shape[0] if weights is None else float(np.sum(weights))
    df2 = n_eff - X_full.shape[1]
    if rss_full <= 0 or df2 <= 0:
        return float("inf"), q, df2
    f = ((rss_reduced - rss_full) / q) / (rss_full / df2)
    return float(f), q, df2
