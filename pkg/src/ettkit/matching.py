"""Propensity matching: greedy k:1 nearest neighbour on the linear score,
balance diagnostics, and outcome-model estimation on the matched set.

Greedy order is fixed and documented: treated units are visited in
descending linear-score order (ties by ascending row index); each of k
passes assigns the nearest eligible control, with equidistant candidates
resolved to the smallest control row index.  The caliper is expressed in
standard deviations of the linear score, where the SD is the sample SD
(ddof=1) over all rows passed in, before any matching.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import linmod
from .errors import SingularDesign
from .weighting import EttEstimate

__all__ = ["MatchSpec", "MatchedSet", "BalanceReport", "nn_match", "balance", "ett_gcomp"]


@dataclass(frozen=True)
class MatchSpec:
    """Matching configuration; defaults are the production setting."""

    ratio: int = 3
    caliper_sd: float = 0.15
    max_reuse: int = 5
    exact_keys: tuple[str, ...] = ("game_year",)
    subgroup_key: str = "stand"

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.max_reuse < 1:
            raise ValueError("max_reuse must be >= 1")
        if not (self.caliper_sd > 0):
            raise ValueError("caliper_sd must be positive (math.inf disables it)")

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "caliper_sd": self.caliper_sd if math.isfinite(self.caliper_sd) else "inf",
            "max_reuse": self.max_reuse,
            "exact_keys": list(self.exact_keys),
            "subgroup_key": self.subgroup_key,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MatchSpec":
        caliper = doc.get("caliper_sd", 0.15)
        return cls(
            ratio=int(doc.get("ratio", 3)),
            caliper_sd=math.inf if caliper == "inf" else float(caliper),
            max_reuse=int(doc.get("max_reuse", 5)),
            exact_keys=tuple(doc.get("exact_keys", ("game_year",))),
            subgroup_key=str(doc.get("subgroup_key", "stand")),
        )


@dataclass
class MatchedSet:
    """Pairs, per-row weights, and bookkeeping from one matching run.

    Weights: every matched treated unit gets 1; each pair contributes
    1/(pairs of its treated unit) to its control, so control weights sum to
    the matched treated count within every exact-key stratum.
    """

    pairs: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    spec: MatchSpec
    score_sd: float
    caliper_abs: float
    matched_treated: int
    unmatched_treated: int
    strata: list[dict] = field(default_factory=list)

    @property
    def control_use_counts(self) -> dict[int, int]:
        rows, counts = np.unique(self.pairs[:, 1], return_counts=True)
        return dict(zip(rows.tolist(), counts.tolist()))

    @property
    def effective_control_size(self) -> float:
        w = self.weights[np.isin(np.arange(len(self.weights)), self.pairs[:, 1])]
        if w.size == 0:
            return 0.0
        return float(w.sum() ** 2 / (w ** 2).sum())

    def validate(self, scores=None, treated=None, strata_labels=None) -> None:
        """Assert structural invariants; raises AssertionError on violation."""
        if self.pairs.size:
            assert np.all(self.distances <= self.caliper_abs * (1 + 1e-12))
            counts = np.unique(self.pairs[:, 1], return_counts=True)[1]
            assert counts.max() <= self.spec.max_reuse
            t_counts = np.unique(self.pairs[:, 0], return_counts=True)[1]
            assert t_counts.max() <= self.spec.ratio
        if treated is not None and strata_labels is not None:
            for key in np.unique(strata_labels):
                mask = strata_labels == key
                m_treated = np.unique(self.pairs[mask[self.pairs[:, 0]], 0]).size
                w_ctrl = self.weights[mask & ~np.asarray(treated, bool)].sum()
                assert abs(w_ctrl - m_treated) <= 1e-9 * max(1.0, m_treated)
        if scores is not None and self.pairs.size:
            gap = np.abs(scores[self.pairs[:, 0]] - scores[self.pairs[:, 1]])
            assert np.allclose(gap, self.distances)

    def to_json(self) -> str:
        doc = {
            "pairs": self.pairs.tolist(),
            "distances": self.distances.tolist(),
            "weights": self.weights.tolist(),
            "spec": self.spec.to_dict(),
            "score_sd": self.score_sd,
            "caliper_abs": self.caliper_abs,
            "matched_treated": self.matched_treated,
            "unmatched_treated": self.unmatched_treated,
            "strata": self.strata,
            "order": "treated by descending score; ties and equidistant "
                     "controls by ascending row index",
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MatchedSet":
        doc = json.loads(text)
        spec_doc = dict(doc["spec"])
        if spec_doc["caliper_sd"] == "inf":
            spec_doc["caliper_sd"] = math.inf
        spec_doc["exact_keys"] = tuple(spec_doc["exact_keys"])
        return cls(
            pairs=np.asarray(doc["pairs"], dtype=np.int64).reshape(-1, 2),
            distances=np.asarray(doc["distances"], dtype=float),
            weights=np.asarray(doc["weights"], dtype=float),
            spec=MatchSpec(**spec_doc),
            score_sd=float(doc["score_sd"]),
            caliper_abs=float(doc["caliper_abs"]),
            matched_treated=int(doc["matched_treated"]),
            unmatched_treated=int(doc["unmatched_treated"]),
            strata=doc["strata"],
        )


def _stratum_labels(exact, n: int) -> np.ndarray:
    """Collapse exact-key columns to integer stratum labels."""
    if exact is None:
        return np.zeros(n, dtype=np.int64), {0: ()}
    if isinstance(exact, pd.DataFrame):
        cols = [exact[c].to_numpy() for c in exact.columns]
    else:
        arr = np.asarray(exact)
        cols = [arr] if arr.ndim == 1 else [arr[:, j] for j in range(arr.shape[1])]
    keys = list(zip(*[c.tolist() for c in cols]))
    labels = np.empty(n, dtype=np.int64)
    lookup: dict = {}
    names: dict[int, tuple] = {}
    for i, key in enumerate(keys):
        code = lookup.setdefault(key, len(lookup))
        labels[i] = code
        names[code] = key
    return labels, names


def _match_stratum(t_idx, t_scores, c_idx, c_scores, caliper, ratio, max_reuse):
    """Greedy passes within one stratum; returns pair list (t_row, c_row, dist)."""
    order_c = np.lexsort((c_idx, c_scores))
    cs = c_scores[order_c]
    rows_c = c_idx[order_c]
    m = len(cs)
    # Lazy doubly linked list over the sorted controls.  Removed nodes keep
    # stale pointers, which only causes extra hops, never wrong neighbours.
    left = np.arange(-1, m - 1)
    right = np.arange(1, m + 1)
    use = np.zeros(m, dtype=np.int64)

    def remove(j):
        l, r = left[j], right[j]
        if r < m:
            left[r] = l
        if l >= 0:
            right[l] = r

    order_t = np.lexsort((t_idx, -t_scores))
    insert = np.searchsorted(cs, t_scores[order_t])
    taken: list[set] = [set() for _ in order_t]
    dead = np.zeros(len(order_t), dtype=bool)
    pairs = []
    for _ in range(ratio):
        progress = False
        for k, ti in enumerate(order_t):
            if dead[k]:
                continue
            tscore = t_scores[ti]
            r = insert[k]
            while r < m and use[r] >= max_reuse:
                r = right[r]
            l = insert[k] - 1
            while l >= 0 and use[l] >= max_reuse:
                l = left[l]
            best = _pick_nearest(
                tscore, cs, rows_c, use, max_reuse, left, right, l, r, m,
                caliper, taken[k],
            )
            if best is None:
                # Eligibility only shrinks, so later passes cannot succeed.
                dead[k] = True
                continue
            j, dist = best
            pairs.append((int(t_idx[ti]), int(rows_c[j]), float(dist)))
            taken[k].add(j)
            use[j] += 1
            progress = True
            if use[j] >= max_reuse:
                remove(j)
        if not progress:
            break
    return pairs


def _pick_nearest(tscore, cs, rows_c, use, max_reuse, left, right, l, r, m,
                  caliper, taken):
    """Nearest eligible control around the insertion point, smallest row
    index among equidistant candidates."""

    def next_right(j):
        j = right[j]
        while j < m and use[j] >= max_reuse:
            j = right[j]
        return j

    def next_left(j):
        j = left[j]
        while j >= 0 and use[j] >= max_reuse:
            j = left[j]
        return j

    # Skip positions already matched to this treated unit, without unlinking.
    while r < m and r in taken:
        r = next_right(r)
    while l >= 0 and l in taken:
        l = next_left(l)
    dist_r = cs[r] - tscore if r < m else math.inf
    dist_l = tscore - cs[l] if l >= 0 else math.inf
    best_dist = min(dist_l, dist_r)
    # inf means both sides are exhausted; it must not pass an inf caliper
    if math.isinf(best_dist) or not (best_dist <= caliper):
        return None
    candidates = []
    # Collect every eligible control at exactly best_dist from both sides;
    # duplicate scores make runs, so walk while the distance holds.
    j = r
    while j < m and cs[j] - tscore == best_dist:
        if j not in taken:
            candidates.append(j)
        j = next_right(j)
    j = l
    while j >= 0 and tscore - cs[j] == best_dist:
        if j not in taken:
            candidates.append(j)
        j = next_left(j)
    best = min(candidates, key=lambda j: rows_c[j])
    return best, best_dist


def nn_match(
    scores: np.ndarray,
    treated: np.ndarray,
    spec: MatchSpec,
    exact=None,
) -> MatchedSet:
    """Greedy k:1 nearest-neighbour match on the linear propensity score.

    Parameters
    ----------
    scores : linear (log-odds) scores, one per row.
    treated : boolean treatment indicator per row.
    spec : MatchSpec; distances must fall within spec.caliper_sd standard
        deviations of `scores` (sample SD over all rows given here).
    exact : optional column(s) that must agree exactly within a pair
        (array, 2-D array, or DataFrame).

    Strata holding treated units but no controls are recorded in the result
    rather than raised.
    """
    scores = np.asarray(scores, dtype=float)
    t = np.asarray(treated, dtype=bool)
    n = scores.shape[0]
    if n == 0:
        raise ValueError("empty input")
    sd = float(np.std(scores, ddof=1)) if n > 1 else 0.0
    caliper_abs = spec.caliper_sd * sd if math.isfinite(spec.caliper_sd) else math.inf
    labels, names = _stratum_labels(exact, n)

    all_pairs: list[tuple[int, int, float]] = []
    strata_report = []
    for code in np.unique(labels):
        mask = labels == code
        t_rows = np.flatnonzero(mask & t)
        c_rows = np.flatnonzero(mask & ~t)
        entry = {
            "key": list(names[code]),
            "n_treated": int(t_rows.size),
            "n_controls": int(c_rows.size),
            "no_controls": bool(t_rows.size > 0 and c_rows.size == 0),
        }
        if t_rows.size and c_rows.size:
            pairs = _match_stratum(
                t_rows, scores[t_rows], c_rows, scores[c_rows],
                caliper_abs, spec.ratio, spec.max_reuse,
            )
            entry["matched_treated"] = len({p[0] for p in pairs})
            all_pairs.extend(pairs)
        else:
            entry["matched_treated"] = 0
        strata_report.append(entry)

    if all_pairs:
        pairs = np.array([(a, b) for a, b, _ in all_pairs], dtype=np.int64)
        distances = np.array([d for _, _, d in all_pairs], dtype=float)
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
        distances = np.empty(0, dtype=float)

    weights = np.zeros(n, dtype=float)
    if len(pairs):
        t_rows, t_counts = np.unique(pairs[:, 0], return_counts=True)
        weights[t_rows] = 1.0
        per_treated = dict(zip(t_rows.tolist(), t_counts.tolist()))
        for (trow, crow), _ in zip(pairs, distances):
            weights[crow] += 1.0 / per_treated[trow]
    matched_treated = int(np.unique(pairs[:, 0]).size) if len(pairs) else 0
    result = MatchedSet(
        pairs=pairs,
        distances=distances,
        weights=weights,
        spec=spec,
        score_sd=sd,
        caliper_abs=caliper_abs,
        matched_treated=matched_treated,
        unmatched_treated=int(t.sum()) - matched_treated,
        strata=strata_report,
    )
    result.validate(scores=scores, treated=t, strata_labels=labels)
    return result


def _weighted_mean(x, w):
    return float(np.sum(w * x) / np.sum(w))


def _weighted_var(x, w):
    mean = _weighted_mean(x, w)
    return float(np.sum(w * (x - mean) ** 2) / np.sum(w))


def _ecdf_distance(x_t, w_t, x_c, w_c) -> tuple[float, float]:
    """Mean and max absolute gap between two weighted empirical CDFs,
    evaluated over the pooled support."""
    grid = np.unique(np.concatenate([x_t, x_c]))

    def cdf(x, w):
        order = np.argsort(x, kind="stable")
        xs, ws = x[order], w[order]
        cum = np.cumsum(ws)
        total = cum[-1]
        pos = np.searchsorted(xs, grid, side="right")
        return np.where(pos > 0, cum[np.minimum(pos, len(cum)) - 1], 0.0) / total

    gaps = np.abs(cdf(x_t, w_t) - cdf(x_c, w_c))
    return float(gaps.mean()), float(gaps.max())


@dataclass
class BalanceReport:
    """Pre/post-match covariate comparability summary."""

    rows: list[dict]
    n_treated: int
    n_control: int
    matched_treated: int
    effective_control_size: float

    def worst_abs_smd_after(self) -> float:
        return max(abs(r["smd_after"]) for r in self.rows)

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": self.rows,
                "n_treated": self.n_treated,
                "n_control": self.n_control,
                "matched_treated": self.matched_treated,
                "effective_control_size": self.effective_control_size,
            },
            sort_keys=True,
        )

    def to_csv_text(self) -> str:
        """Plot-ready table: one row per covariate, pre and post columns."""
        header = (
            "covariate,smd_before,smd_after,ecdf_mean_before,ecdf_mean_after,"
            "ecdf_max_before,ecdf_max_after,var_ratio_before,var_ratio_after"
        )
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r['covariate']},{r['smd_before']!r},{r['smd_after']!r},"
                f"{r['ecdf_mean_before']!r},{r['ecdf_mean_after']!r},"
                f"{r['ecdf_max_before']!r},{r['ecdf_max_after']!r},"
                f"{r['var_ratio_before']!r},{r['var_ratio_after']!r}"
            )
        return "\n".join(lines) + "\n"


def balance(
    frame: pd.DataFrame,
    treated: np.ndarray,
    matched: MatchedSet,
    covariates: list[str],
) -> BalanceReport:
    """Standardized mean differences, eCDF distances, and variance ratios,
    before matching (raw groups) and after (match weights).

    The SMD denominator is the treated-group standard deviation from the
    unmatched sample, for both phases, so pre and post values share a scale.
    """
    t = np.asarray(treated, dtype=bool)
    w = matched.weights
    w_t, w_c = w[t], w[~t]
    if w_t.sum() == 0 or w_c.sum() == 0:
        raise ValueError("matched set has an empty arm; balance is undefined")
    rows = []
    for cov in covariates:
        x = frame[cov].to_numpy(dtype=float)
        x_t, x_c = x[t], x[~t]
        denom = float(np.std(x_t, ddof=1)) if x_t.size > 1 else 0.0
        mean_diff_before = float(x_t.mean() - x_c.mean())
        mean_diff_after = _weighted_mean(x_t, w_t) - _weighted_mean(x_c, w_c)
        ecdf_before = _ecdf_distance(x_t, np.ones_like(x_t), x_c, np.ones_like(x_c))
        keep_t, keep_c = w_t > 0, w_c > 0
        ecdf_after = _ecdf_distance(x_t[keep_t], w_t[keep_t], x_c[keep_c], w_c[keep_c])
        var_c_before = float(np.var(x_c, ddof=1)) if x_c.size > 1 else 0.0
        var_c_after = _weighted_var(x_c[keep_c], w_c[keep_c])
        rows.append(
            {
                "covariate": cov,
                "smd_before": mean_diff_before / denom if denom > 0 else float("nan"),
                "smd_after": mean_diff_after / denom if denom > 0 else float("nan"),
                "ecdf_mean_before": ecdf_before[0],
                "ecdf_mean_after": ecdf_after[0],
                "ecdf_max_before": ecdf_before[1],
                "ecdf_max_after": ecdf_after[1],
                "var_ratio_before": (
                    float(np.var(x_t, ddof=1)) / var_c_before
                    if var_c_before > 0 else float("nan")
                ),
                "var_ratio_after": (
                    _weighted_var(x_t[keep_t], w_t[keep_t]) / var_c_after
                    if var_c_after > 0 else float("nan")
                ),
            }
        )
    return BalanceReport(
        rows=rows,
        n_treated=int(t.sum()),
        n_control=int((~t).sum()),
        matched_treated=matched.matched_treated,
        effective_control_size=matched.effective_control_size,
    )


def ett_gcomp(
    frame: pd.DataFrame,
    treated: np.ndarray,
    matched: MatchedSet,
    outcome: str,
    covariates: list[str],
    categorical: tuple[str, ...] = ("game_year",),
    subgroup: str = "all",
) -> EttEstimate:
    """Outcome-model estimate on the matched set.

    Fits a weighted linear model of the outcome on treatment, covariates,
    and the categorical strata, then predicts both potential outcomes for
    every matched treated unit; the estimate is the mean predicted
    difference.  The SE is the HC1 sandwich on the treatment coefficient
    with the fractional re-use weights entering as score scales (importance
    reading; the frequency reading overstates the variance of a matched set
    whose controls are mostly distinct), with a normal 95% interval.
    """
    t = np.asarray(treated, dtype=bool)
    rows = matched.weights > 0
    if not rows.any():
        raise ValueError("no matched rows; nothing to fit")
    sub = frame.loc[rows]
    w = matched.weights[rows]
    t_sub = t[rows].astype(float)
    X0, names0 = linmod.design_matrix(
        sub, continuous=list(covariates), categorical=list(categorical)
    )
    X = np.hstack([X0[:, :1], t_sub[:, None], X0[:, 1:]])
    names = [names0[0], "treatment"] + names0[1:]
    y = sub[outcome].to_numpy(dtype=float)
    coef = linmod.fit_wls(X, y, w, names=names)
    cov = linmod.hc1_cov(X, y, coef, w, weight_kind="importance")
    t_col = names.index("treatment")
    se = float(np.sqrt(cov[t_col, t_col]))

    X1, Xneg = X.copy(), X.copy()
    X1[:, t_col] = 1.0
    Xneg[:, t_col] = 0.0
    diff = (X1 - Xneg) @ coef
    estimate = float(diff[t_sub == 1.0].mean())
    return EttEstimate(
        method="match",
        subgroup=subgroup,
        estimate=estimate,
        se=se,
        ci_lower=estimate - 1.96 * se,
        ci_upper=estimate + 1.96 * se,
        n_treated=matched.matched_treated,
        n_control=int(np.unique(matched.pairs[:, 1]).size),
        diagnostics={
            "unmatched_treated": matched.unmatched_treated,
            "effective_control_size": matched.effective_control_size,
            "caliper_abs": matched.caliper_abs,
            "score_sd": matched.score_sd,
            "n_pairs": int(len(matched.pairs)),
            "model_columns": names,
            "se_flavor": "HC1-importance",
        },
    )
