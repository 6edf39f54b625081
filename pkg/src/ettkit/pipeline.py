"""Orchestration shared by the HTTP service and the command line.

Each runner takes plain inputs and returns JSON-ready documents (plus
DataFrames where a dataset is produced); writing files is the caller's job.
All randomness descends from one seed split into named streams, and worker
counts never enter any output document, so reruns are byte-identical for
any thread count.
"""
from __future__ import annotations

import json

import numpy as np
import pandas as pd

from . import __version__, iv as ivmod, linmod, matching, propensity, rng as rngmod
from . import schema, scm, weighting
from .errors import EttkitError

__all__ = [
    "SCM_PRESETS",
    "resolve_scm_config",
    "run_simulate",
    "run_estimate",
    "run_diagnose",
    "figure_csv_text",
    "results_json",
]

METHODS = ("match", "iptw", "iv")

SCM_PRESETS = ("standard", "league", "confounded", "null")


def _jsonable(value):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def resolve_scm_config(
    preset: str = "standard",
    config_doc: dict | None = None,
    seed: int | None = None,
    n_units: int | None = None,
) -> scm.ScmConfig:
    """Build the generator config from a preset name or an explicit document.

    An explicit document wins over the preset; seed and n_units override
    either when given.
    """
    if config_doc is not None:
        config = scm.ScmConfig.from_dict(config_doc)
    elif preset == "standard":
        config = scm.ScmConfig()
    elif preset == "league":
        config = scm.league_config()
    elif preset == "confounded":
        config = scm.confounded_config()
    elif preset == "null":
        config = scm.ScmConfig(effect=scm.EffectSpec(constant=0.0))
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {SCM_PRESETS}")
    replacements = {}
    if seed is not None:
        replacements["seed"] = int(seed)
    if n_units is not None:
        replacements["n_units"] = int(n_units)
    if replacements:
        from dataclasses import replace

        config = replace(config, **replacements)
    return config


def run_simulate(
    preset: str = "standard",
    config_doc: dict | None = None,
    seed: int | None = None,
    n_units: int | None = None,
) -> dict:
    """Generate one synthetic dataset with its ground truth and marginals."""
    config = resolve_scm_config(preset, config_doc, seed, n_units)
    dataset, truth = scm.generate(config)
    ett, ett_se = scm.true_ett(config)
    return {
        "config": _jsonable(config.to_dict()),
        "dataset": dataset,
        "truth": truth,
        "true_ett": float(ett),
        "true_ett_se": float(ett_se),
        "marginals": _jsonable(scm.marginals_report(dataset)),
    }


def _subgroup_frames(dataset: pd.DataFrame, subgroups) -> list[tuple[str, pd.DataFrame]]:
    sides = ("L", "R") if subgroups in ("both", None) else (
        [subgroups] if isinstance(subgroups, str) else list(subgroups)
    )
    out = []
    for side in sides:
        sub = dataset[dataset[schema.BATTER_SIDE] == side].reset_index(drop=True)
        out.append((side, sub))
    return out


def _propensity_design(frame: pd.DataFrame):
    covs = schema.covariate_columns(frame)
    X, names = linmod.design_matrix(
        frame,
        continuous=covs,
        categorical=[schema.PITCHER_HAND, schema.YEAR],
        intercept=False,
    )
    return X, names, covs


def _child_seed(seed: int, *labels) -> int:
    return int(rngmod.seed_sequence(seed, *labels).generate_state(1)[0])


def _estimate_one(
    frame: pd.DataFrame,
    method: str,
    side: str,
    seed: int,
    n_resamples: int,
    threads: int,
    normalized: bool,
    refit: bool,
    match_spec: matching.MatchSpec,
    iv_spec: ivmod.IvSpec,
    keep_replicates: bool,
) -> weighting.EttEstimate:
    t = frame[schema.TREATMENT].to_numpy(dtype=bool)
    y = frame[schema.OUTCOME].to_numpy(dtype=float)
    plan = weighting.BootstrapPlan(
        n_resamples=n_resamples, seed=_child_seed(seed, "estimate", method, side)
    )
    if method == "match":
        X, names, covs = _propensity_design(frame)
        model = propensity.fit_logistic(X, t, names)
        scores = model.linear_score(X, names)
        exact = frame[list(match_spec.exact_keys)] if match_spec.exact_keys else None
        matched = matching.nn_match(scores, t, match_spec, exact=exact)
        return matching.ett_gcomp(
            frame, t, matched, schema.OUTCOME, covs, subgroup=side
        )
    if method == "iptw":
        X, names, _ = _propensity_design(frame)
        return weighting.ett_iptw_estimate(
            X, t, y, names, plan,
            subgroup=side, normalized=normalized, refit=refit,
            threads=threads, keep_replicates=keep_replicates,
        )
    if method == "iv":
        estimate, _ = ivmod.ett_iv(
            frame, iv_spec, plan,
            subgroup=side, threads=threads, keep_replicates=keep_replicates,
        )
        return estimate
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def run_estimate(
    dataset: pd.DataFrame,
    methods=METHODS,
    subgroups="both",
    seed: int = 0,
    n_resamples: int = 10000,
    threads: int = 1,
    normalized: bool = False,
    refit: bool = True,
    match_spec: matching.MatchSpec | None = None,
    iv_spec: ivmod.IvSpec | None = None,
    dump_replicates: bool = True,
) -> dict:
    """Run the selected estimators on each handedness subgroup.

    Returns a results document: schema version, the resolved configuration
    (everything that affects numbers; thread count deliberately excluded),
    one estimate per method and subgroup, and per-method replicate dumps
    for the bootstrapped methods when requested.
    """
    schema.validate_dataset(dataset)
    if isinstance(methods, str):
        methods = METHODS if methods == "all" else (methods,)
    match_spec = match_spec or matching.MatchSpec()
    iv_spec = iv_spec or ivmod.IvSpec()
    results = []
    replicates: dict[str, list[float]] = {}
    for side, frame in _subgroup_frames(dataset, subgroups):
        for method in methods:
            try:
                est = _estimate_one(
                    frame, method, side, seed, n_resamples, threads,
                    normalized, refit, match_spec, iv_spec, dump_replicates,
                )
            except EttkitError as err:
                err.args = (f"[{method}/{side}] {err}",)
                raise
            reps = est.diagnostics.pop("replicates", None)
            if reps is not None:
                replicates[f"{method}_{side}"] = reps
            results.append(est.to_dict())
    doc = {
        "schema_version": schema.SCHEMA_VERSION,
        "tool": f"ettkit {__version__}",
        "config": {
            "methods": list(methods),
            "subgroups": subgroups if isinstance(subgroups, str) else list(subgroups),
            "seed": int(seed),
            "n_resamples": int(n_resamples),
            "normalized": bool(normalized),
            "refit_per_resample": bool(refit),
            "match_spec": match_spec.to_dict(),
            "iv_spec": iv_spec.to_dict(),
        },
        "results": _jsonable(results),
    }
    if dump_replicates:
        doc["_replicates"] = {k: _jsonable(v) for k, v in replicates.items()}
    return doc


def figure_csv_text(doc: dict) -> str:
    """Plot-ready rows (method, subgroup, estimate, lower, upper)."""
    lines = ["method,subgroup,estimate,lower,upper"]
    for row in doc["results"]:
        lines.append(
            f"{row['method']},{row['subgroup']},{row['estimate']!r},"
            f"{row['ci_lower']!r},{row['ci_upper']!r}"
        )
    return "\n".join(lines) + "\n"


def results_json(doc: dict) -> str:
    slim = {k: v for k, v in doc.items() if not k.startswith("_")}
    return json.dumps(slim, indent=2, sort_keys=True)


def run_diagnose(
    dataset: pd.DataFrame,
    subgroups="both",
    match_spec: matching.MatchSpec | None = None,
    iv_spec: ivmod.IvSpec | None = None,
    alpha: float = 0.01,
) -> dict:
    """Balance, positivity, and instrument checks per handedness subgroup.

    Balance is reported before matching (All) and after (Matched) for each
    covariate, mirroring the estimate pipeline's matched sets.
    """
    schema.validate_dataset(dataset)
    match_spec = match_spec or matching.MatchSpec()
    iv_spec = iv_spec or ivmod.IvSpec()
    doc: dict = {
        "schema_version": schema.SCHEMA_VERSION,
        "tool": f"ettkit {__version__}",
        "config": {"match_spec": match_spec.to_dict(), "alpha": alpha},
        "subgroups": {},
    }
    balance_csv: dict[str, str] = {}
    for side, frame in _subgroup_frames(dataset, subgroups):
        section: dict = {}
        X, names, covs = _propensity_design(frame)
        t = frame[schema.TREATMENT].to_numpy(dtype=bool)
        model = propensity.fit_logistic(X, t, names)
        probs = model.prob_score(X, names)
        section["positivity"] = propensity.positivity_report(
            probs, t, frame[schema.YEAR].to_numpy()
        )
        exact = frame[list(match_spec.exact_keys)] if match_spec.exact_keys else None
        matched = matching.nn_match(model.linear_score(X, names), t, match_spec, exact=exact)
        report = matching.balance(frame, t, matched, covs)
        section["balance"] = {
            "rows": report.rows,
            "matched_treated": report.matched_treated,
            "unmatched_treated": matched.unmatched_treated,
            "worst_abs_smd_after": report.worst_abs_smd_after(),
        }
        balance_csv[side] = report.to_csv_text()
        if iv_spec.instrument in frame.columns:
            section["instrument"] = ivmod.instrument_diagnostics(frame, iv_spec, alpha=alpha)
        doc["subgroups"][side] = section
    doc = _jsonable(doc)
    doc["_balance_csv"] = balance_csv
    return doc
